//! Training loop: batching by scene, weighted updates driven by the configured
//! strategy, per-epoch validation, and the trace.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::model::{self, EncodedSplit, MetricsReport, ModelConfig, ModelError, VqaModel};
use crate::optim::{Optimizer, OptimizerKind};
use crate::rng::counter_hash;
use crate::spcl::{self, CurriculumPrior, EpochRecord, PaceState, SampleLearner, SpclConfig, SpclError};
use crate::synthdata::{QuestionType, Split};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Spcl(#[from] SpclError),
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub spcl: SpclConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub prior: CurriculumPrior,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            spcl: SpclConfig::default(),
            epochs: 60,
            batch_size: 64,
            lr: 1e-3,
            optimizer: OptimizerKind::Adaptive,
            prior: CurriculumPrior::default(),
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("epochs and batch size must be positive".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::InvalidConfig(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(self.spcl.tau0 > 0.0 && self.spcl.tau0 <= 1.0) {
            return Err(SpclError::InvalidTau(self.spcl.tau0).into());
        }
        Ok(())
    }
}

/// One row of the per-epoch trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRow {
    pub record_epoch: usize,
    pub phase: &'static str,
    pub k: Option<f64>,
    pub lambda: Option<f64>,
    pub mean_loss: f64,
    /// Fraction of training samples with `v > 0`, per type (None if absent).
    pub inclusion: [Option<f64>; 5],
    pub mean_v: [Option<f64>; 5],
    pub val: MetricsReport,
}

pub fn trace_header() -> String {
    let mut cols = vec!["epoch".to_string(), "phase".into(), "K".into(), "lambda".into(), "mean_loss".into()];
    for prefix in ["prop", "meanv", "valacc"] {
        cols.extend(QuestionType::ALL.iter().map(|t| format!("{prefix}_{t}")));
    }
    cols.push("val_AA".into());
    cols.push("val_OA".into());
    cols.join(",")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TraceRow {
    pub fn to_csv_line(&self) -> String {
        let mut cols = vec![self.record_epoch.to_string(), self.phase.to_string(), opt(self.k), opt(self.lambda), self.mean_loss.to_string()];
        cols.extend(self.inclusion.iter().map(|&v| opt(v)));
        cols.extend(self.mean_v.iter().map(|&v| opt(v)));
        cols.extend(QuestionType::ALL.iter().map(|&t| opt(self.val.accuracy(t))));
        cols.push(self.val.average_accuracy().to_string());
        cols.push(self.val.overall_accuracy().to_string());
        cols.join(",")
    }
}

pub fn trace_csv(rows: &[TraceRow]) -> String {
    let mut out = trace_header();
    out.push('\n');
    for r in rows {
        writeln!(out, "{}", r.to_csv_line()).unwrap();
    }
    out
}

fn summarize(record: &EpochRecord, split: &EncodedSplit, val: MetricsReport) -> TraceRow {
    let mut counts = [0usize; 5];
    let mut included = [0usize; 5];
    let mut vsum = [0.0; 5];
    for (s, &v) in split.samples.iter().zip(&record.weights) {
        let i = s.qtype.index();
        counts[i] += 1;
        included[i] += (v > 0.0) as usize;
        vsum[i] += v;
    }
    let frac = |num: f64, i: usize| (counts[i] > 0).then(|| num / counts[i] as f64);
    TraceRow {
        record_epoch: record.epoch,
        phase: record.phase.as_str(),
        k: record.k,
        lambda: record.lambda,
        mean_loss: record.losses.iter().sum::<f64>() / record.losses.len() as f64,
        inclusion: std::array::from_fn(|i| frac(included[i] as f64, i)),
        mean_v: std::array::from_fn(|i| frac(vsum[i], i)),
        val,
    }
}

/// Groups training samples by scene, shuffles the scene order, and cuts the
/// concatenation into batches. Every sample appears exactly once.
pub fn scene_batches(split: &EncodedSplit, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_scene: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in split.samples.iter().enumerate() {
        by_scene.entry(s.scene_id).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = by_scene.into_values().collect();
    groups.shuffle(rng);
    let flat: Vec<usize> = groups.into_iter().flatten().collect();
    flat.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

struct Learner<'a> {
    model: &'a mut VqaModel,
    optimizer: Optimizer,
    split: &'a EncodedSplit,
}

impl SampleLearner for Learner<'_> {
    type Error = TrainError;

    fn train_batch(&mut self, batch: &[usize], weigh: &mut dyn FnMut(&[f64]) -> Vec<f64>) -> Result<Vec<f64>> {
        let (inputs, labels) = self.split.batch(batch)?;
        let mut tape = Tape::new();
        let p = self.model.params.bind(&mut tape, true)?;
        let out = model::forward(&mut tape, &p, &self.model.config, &inputs)?;
        let losses_var = model::sample_loss(&mut tape, out.logits, &labels)?;
        let losses = tape.value(losses_var)?.data().to_vec();
        let v = weigh(&losses);
        let v_var = tape.constant(Tensor::new(vec![v.len()], v)?)?;
        let weighted = tape.mul(losses_var, v_var)?;
        let total = tape.sum(weighted)?;
        let objective = tape.scale_shift(total, 1.0 / batch.len() as f64, 0.0)?;
        let grads: ParamStore = p.gradients(&tape, objective)?;
        self.optimizer.step(&mut self.model.params, &grads)?;
        Ok(losses)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: VqaModel,
    pub best: VqaModel,
    pub best_epoch: usize,
    pub trace: Vec<TraceRow>,
    pub records: Vec<EpochRecord>,
}

/// Trains `model` on `train` with the configured strategy, validating on `val`
/// after every epoch. The best model is the one with the highest validation OA,
/// earliest epoch first on ties. `on_epoch` sees every trace row as it is produced.
pub fn train(
    mut model: VqaModel,
    train: &EncodedSplit,
    val: &EncodedSplit,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TraceRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptySplit(Split::Train.as_str()).into());
    }
    if val.is_empty() {
        return Err(ModelError::EmptySplit(Split::Val.as_str()).into());
    }
    let samples: Vec<(QuestionType, usize)> = train.samples.iter().map(|s| (s.qtype, s.length)).collect();
    let scores = match cfg.spcl.strategy {
        spcl::Strategy::Spcl => spcl::ranking_scores(&samples, &cfg.prior)?,
        _ => vec![1.0; samples.len()],
    };
    let mut order_rng = ChaCha8Rng::seed_from_u64(counter_hash(cfg.seed, 0xBA7C, 0));
    let optimizer = Optimizer::new(cfg.optimizer, cfg.lr, &model.params);
    let mut state = PaceState::default();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut learner = Learner { model: &mut model, optimizer, split: train };
    for _ in 0..cfg.epochs {
        let batches = scene_batches(train, cfg.batch_size, &mut order_rng);
        let record = spcl::spcl_epoch(&mut learner, &batches, &scores, &cfg.spcl, &mut state)?;
        let report = learner.model.evaluate(val)?;
        let row = summarize(&record, train, report);
        let oa = row.val.overall_accuracy();
        if best.as_ref().is_none_or(|(b, _, _)| oa > *b) {
            best = Some((oa, record.epoch, learner.model.params.clone()));
        }
        on_epoch(&row);
        trace.push(row);
        records.push(record);
    }
    let (_, best_epoch, best_params) = best.expect("at least one epoch");
    let best = VqaModel { params: best_params, ..model.clone() };
    Ok(TrainOutcome { model, best, best_epoch, trace, records })
}

/// Convenience for building a model whose vocabulary comes from the training split.
pub fn fresh_model(data: &crate::synthdata::Dataset, config: ModelConfig, seed: u64) -> Result<VqaModel> {
    let vocab = model::build_vocabulary(data)?;
    Ok(VqaModel::new(config, vocab, model::AnswerSet::default(), seed)?)
}
