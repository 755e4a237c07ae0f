//! Self-paced curriculum learning: per-sample weights from the soft self-paced
//! regularizer, the loss-threshold pace schedule, and the prior-driven curriculum
//! region used to initialize the weights.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::synthdata::QuestionType;

#[derive(Debug, Error, PartialEq)]
pub enum SpclError {
    #[error("lambda must be positive, got {0}")]
    NonPositiveLambda(f64),
    #[error("loss must be finite and non-negative, got {0}")]
    InvalidLoss(f64),
    #[error("pace update needs at least one loss")]
    EmptyLosses,
    #[error("no prior weight for question type {0}")]
    MissingPrior(QuestionType),
    #[error("curriculum fraction tau must lie in (0, 1], got {0}")]
    InvalidTau(f64),
    #[error("maximum question length is zero")]
    ZeroLength,
}

pub type Result<T> = std::result::Result<T, SpclError>;

/// Minimizer over `v` in [0, 1] of `v L + lambda (v^2 / 2 - v)`.
pub fn spl_weight(loss: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(SpclError::NonPositiveLambda(lambda));
    }
    if !(loss >= 0.0) || !loss.is_finite() {
        return Err(SpclError::InvalidLoss(loss));
    }
    Ok(if loss <= lambda { 1.0 - loss / lambda } else { 0.0 })
}

/// Pace fraction for epoch `t`.
pub fn pace_k(t: usize) -> f64 {
    0.5 + (t as f64 / 15.0) * 0.1
}

/// Returns `(K, lambda)` where lambda interpolates between the minimum and
/// maximum of the previous epoch's losses.
pub fn update_pace(prev_losses: &[f64], t: usize) -> Result<(f64, f64)> {
    if prev_losses.is_empty() {
        return Err(SpclError::EmptyLosses);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &l in prev_losses {
        if !l.is_finite() {
            return Err(SpclError::InvalidLoss(l));
        }
        lo = lo.min(l);
        hi = hi.max(l);
    }
    let k = pace_k(t);
    Ok((k, (hi - lo) * k + lo))
}

/// Prior difficulty weight per question type.
#[derive(Clone, Debug, PartialEq)]
pub struct CurriculumPrior {
    pub weights: BTreeMap<QuestionType, f64>,
}

impl Default for CurriculumPrior {
    fn default() -> Self {
        let weights = [
            (QuestionType::RuralUrban, 1.0),
            (QuestionType::Presence, 1.0),
            (QuestionType::Comparison, 3.0),
            (QuestionType::Count, 4.0),
            (QuestionType::Area, 4.0),
        ];
        CurriculumPrior { weights: weights.into_iter().collect() }
    }
}

impl CurriculumPrior {
    pub fn weight(&self, qtype: QuestionType) -> Result<f64> {
        self.weights.get(&qtype).copied().ok_or(SpclError::MissingPrior(qtype))
    }
}

impl fmt::Display for CurriculumPrior {
    /// `type:weight` pairs joined by commas.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.weights.iter().map(|(t, w)| format!("{t}:{w}")).collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for CurriculumPrior {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let mut weights = BTreeMap::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part.split_once(':').ok_or_else(|| format!("expected type:weight, got {part:?}"))?;
            let qtype: QuestionType = name.trim().parse()?;
            let w: f64 = value.trim().parse().map_err(|_| format!("invalid weight {value:?} for {name}"))?;
            if !(w > 0.0) || !w.is_finite() {
                return Err(format!("prior weight for {name} must be positive, got {w}"));
            }
            weights.insert(qtype, w);
        }
        Ok(CurriculumPrior { weights })
    }
}

/// `a_i = W(type_i) * tokens_i / max_tokens` for each `(type, token count)` sample.
pub fn ranking_scores(samples: &[(QuestionType, usize)], prior: &CurriculumPrior) -> Result<Vec<f64>> {
    let max = samples.iter().map(|s| s.1).max().unwrap_or(0);
    if max == 0 {
        return Err(SpclError::ZeroLength);
    }
    samples.iter().map(|&(t, n)| Ok(prior.weight(t)? * (n as f64 / max as f64))).collect()
}

fn dot(a: &[f64], v: &[f64]) -> f64 {
    a.iter().zip(v).map(|(x, y)| x * y).sum()
}

/// Greedy easiest-first weights satisfying `a . v <= tau * sum(a)`: samples sorted by
/// `(a_i, i)` get weight 1 until the budget binds, the next one takes the remaining
/// budget as a fractional weight, and the rest get 0.
pub fn init_curriculum(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(SpclError::InvalidTau(tau));
    }
    let total: f64 = scores.iter().sum();
    let budget = tau * total;
    if tau == 1.0 {
        return Ok(vec![1.0; scores.len()]);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    let mut v = vec![0.0; scores.len()];
    let mut remaining = budget;
    let mut last = None;
    for &i in &order {
        let a = scores[i];
        if a <= remaining {
            v[i] = 1.0;
            remaining -= a;
            last = Some(i);
        } else {
            v[i] = (remaining / a).clamp(0.0, 1.0);
            last = Some(i);
            break;
        }
    }
    // the greedy arithmetic and the dot product round differently; shave the last
    // assigned weight until the constraint holds in floating point
    while dot(scores, &v) > budget {
        match last {
            Some(i) if v[i] > 0.0 => v[i] = (v[i] - f64::EPSILON).max(0.0),
            _ => break,
        }
    }
    Ok(v)
}

/// Curriculum fraction for a CL epoch, growing linearly from `tau0` at `t = 0`
/// to 1 at `t = cl_epochs`.
pub fn curriculum_tau(tau0: f64, t: usize, cl_epochs: usize) -> f64 {
    if cl_epochs == 0 {
        return tau0;
    }
    (tau0 + (1.0 - tau0) * t as f64 / cl_epochs as f64).min(1.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Uniform weights every epoch.
    Shuffle,
    /// Self-paced weights from the second epoch on; the first epoch is uniform.
    Spl,
    /// Curriculum weights for `cl_epochs` epochs, then self-paced weights.
    Spcl,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Shuffle => "shuffle",
            Strategy::Spl => "spl",
            Strategy::Spcl => "spcl",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "shuffle" => Ok(Strategy::Shuffle),
            "spl" => Ok(Strategy::Spl),
            "spcl" => Ok(Strategy::Spcl),
            _ => Err(format!("unknown strategy {s:?} (expected shuffle, spl, or spcl)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Phase {
    Uniform,
    Cl,
    Spl,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Uniform => "uniform",
            Phase::Cl => "CL",
            Phase::Spl => "SPL",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpclConfig {
    pub strategy: Strategy,
    pub cl_epochs: usize,
    pub tau0: f64,
}

impl Default for SpclConfig {
    fn default() -> Self {
        SpclConfig { strategy: Strategy::Spcl, cl_epochs: 15, tau0: 0.5 }
    }
}

/// Curriculum state carried between epochs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PaceState {
    /// Index of the next epoch to run.
    pub t: usize,
    pub k: Option<f64>,
    pub lambda: Option<f64>,
    /// Per-sample losses recorded during the previous epoch.
    pub prev_losses: Option<Vec<f64>>,
    /// Per-sample weights used during the previous epoch.
    pub v: Vec<f64>,
}

/// Something that can take one weighted optimization step on a batch of
/// training-sample indices.
pub trait SampleLearner {
    type Error: From<SpclError>;

    /// Evaluates per-sample losses on `batch` with the current parameters, passes
    /// them to `weigh` to obtain weights `v`, and takes one step on
    /// `sum(v_i L_i) / |batch|`. Returns the losses seen before the step.
    fn train_batch(&mut self, batch: &[usize], weigh: &mut dyn FnMut(&[f64]) -> Vec<f64>) -> std::result::Result<Vec<f64>, Self::Error>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub k: Option<f64>,
    pub lambda: Option<f64>,
    pub losses: Vec<f64>,
    pub weights: Vec<f64>,
    /// Batches in which every self-paced weight was 0 and uniform weights were used.
    pub fallback_batches: usize,
}

enum Weighting {
    Uniform,
    Fixed(Vec<f64>),
    SelfPaced(f64),
}

/// Runs one epoch over `batches` (indices into the `scores` table) and advances
/// `state`. `scores` are the curriculum ranking scores of the training samples.
pub fn spcl_epoch<L: SampleLearner>(
    learner: &mut L,
    batches: &[Vec<usize>],
    scores: &[f64],
    cfg: &SpclConfig,
    state: &mut PaceState,
) -> std::result::Result<EpochRecord, L::Error> {
    let n = scores.len();
    let t = state.t;
    let (phase, weighting, k, lambda) = match (cfg.strategy, state.prev_losses.as_deref()) {
        (Strategy::Shuffle, _) => (Phase::Uniform, Weighting::Uniform, None, None),
        (Strategy::Spcl, _) if t < cfg.cl_epochs || t == 0 => {
            let tau = curriculum_tau(cfg.tau0, t, cfg.cl_epochs);
            (Phase::Cl, Weighting::Fixed(init_curriculum(scores, tau)?), None, None)
        }
        (Strategy::Spl, None) => (Phase::Uniform, Weighting::Uniform, None, None),
        (_, Some(prev)) => {
            let (k, lambda) = update_pace(prev, t)?;
            (Phase::Spl, Weighting::SelfPaced(lambda), Some(k), Some(lambda))
        }
        (Strategy::Spcl, None) => unreachable!("spcl epoch 0 is always a curriculum epoch"),
    };

    let mut losses = vec![f64::NAN; n];
    let mut weights = vec![0.0; n];
    let mut fallback_batches = 0;
    let mut failure = None;
    for batch in batches {
        let mut batch_v = Vec::new();
        let mut weigh = |l: &[f64]| -> Vec<f64> {
            let v = match &weighting {
                Weighting::Uniform => vec![1.0; l.len()],
                Weighting::Fixed(v) => batch.iter().map(|&i| v[i]).collect(),
                Weighting::SelfPaced(lambda) => {
                    let computed: std::result::Result<Vec<f64>, SpclError> = l.iter().map(|&x| spl_weight(x, *lambda)).collect();
                    match computed {
                        Ok(v) if v.iter().any(|&w| w > 0.0) => v,
                        Ok(_) => {
                            log::info!("epoch {t}: every self-paced weight in a batch is 0 (lambda {lambda}); using uniform weights");
                            fallback_batches += 1;
                            vec![1.0; l.len()]
                        }
                        Err(e) => {
                            failure = Some(e);
                            vec![0.0; l.len()]
                        }
                    }
                }
            };
            batch_v = v.clone();
            v
        };
        let batch_losses = learner.train_batch(batch, &mut weigh)?;
        if let Some(e) = failure.take() {
            return Err(e.into());
        }
        for (j, &i) in batch.iter().enumerate() {
            losses[i] = batch_losses[j];
            weights[i] = batch_v[j];
        }
    }

    state.t += 1;
    state.k = k;
    state.lambda = lambda;
    state.prev_losses = Some(losses.clone());
    state.v = weights.clone();
    Ok(EpochRecord { epoch: t, phase, k, lambda, losses, weights, fallback_batches })
}
