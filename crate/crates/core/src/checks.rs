//! Seeded micro-scale gradient checks for each model component.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{finite_diff_check, BoundParams, GradCheckOptions, GradCheckReport, ParamStore, Result, Tape, Tensor, Var};
use crate::cga::{self, AttentionMode};
use crate::cst::{self, TransformMode};
use crate::encoders::{self, ImageEncoderConfig, QuestionEncoderConfig};
use crate::model::{self, Batch, Fusion, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CheckModule {
    Encoders,
    Cga,
    Cst,
    Model,
}

impl CheckModule {
    pub const ALL: [CheckModule; 4] = [CheckModule::Encoders, CheckModule::Cga, CheckModule::Cst, CheckModule::Model];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckModule::Encoders => "encoders",
            CheckModule::Cga => "cga",
            CheckModule::Cst => "cst",
            CheckModule::Model => "model",
        }
    }
}

impl fmt::Display for CheckModule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CheckModule {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        CheckModule::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown module {s:?} (expected encoders, cga, cst, or model)"))
    }
}

const SEED: u64 = 0x6C4E_C4EC;

fn random(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

/// Replaces every tensor with draws from N(0, std^2), so that no block sits at a
/// special point such as zero-initialized weights.
fn randomize(store: &mut ParamStore, std: f64, rng: &mut ChaCha8Rng) {
    for (_, t) in store.iter_mut() {
        let r = random(t.shape(), std, rng);
        t.data_mut().copy_from_slice(r.data());
    }
}

/// `sum(r * x)` for a fixed random `r`, a scalar head with generic gradients.
fn probe(tape: &mut Tape, x: Var, rng: &mut ChaCha8Rng) -> Result<Var> {
    let shape = tape.shape(x)?.to_vec();
    let r = tape.constant(random(&shape, 1.0, rng))?;
    let prod = tape.mul(x, r)?;
    tape.sum(prod)
}

fn micro_image() -> ImageEncoderConfig {
    ImageEncoderConfig { channels: vec![3, 4], strides: vec![2, 2], kernel: 3 }
}

fn micro_question() -> QuestionEncoderConfig {
    QuestionEncoderConfig { embed_dim: 3, hidden: 4, max_tokens: 20 }
}

const QUESTIONS: [&[usize]; 2] = [&[2, 5, 3], &[4, 1]];

fn questions() -> Vec<Vec<usize>> {
    QUESTIONS.iter().map(|q| q.to_vec()).collect()
}

fn check_encoders(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut store = ParamStore::new();
    encoders::init_image_encoder(&mut store, &micro_image(), &mut rng);
    encoders::init_question_encoder(&mut store, 6, &micro_question(), &mut rng);
    randomize(&mut store, 0.5, &mut rng);
    let images = Tensor::new(vec![2, 3, 8, 8], (0..384).map(|_| rng.random::<f64>()).collect())?;
    let probe_seed = rng.random::<u64>();
    finite_diff_check(
        |tape: &mut Tape, p: &BoundParams| {
            let mut r = ChaCha8Rng::seed_from_u64(probe_seed);
            let x = tape.constant(images.clone())?;
            let fx = encoders::encode_image(tape, p, x, &micro_image())?;
            let vq = encoders::encode_questions(tape, p, &questions(), &micro_question())?;
            let a = probe(tape, fx, &mut r)?;
            let b = probe(tape, vq, &mut r)?;
            tape.add(a, b)
        },
        &store,
        opts,
    )
}

fn cga_fixture(rng: &mut ChaCha8Rng, h: usize, w: usize) -> ParamStore {
    let mut store = ParamStore::new();
    cga::init_cga(&mut store, 4, 5, rng);
    store.insert("input.fx", Tensor::zeros(&[2, 4, h, w]));
    store.insert("input.vq", Tensor::zeros(&[2, 5]));
    randomize(&mut store, 0.5, rng);
    store
}

fn check_cga(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 1);
    let store = cga_fixture(&mut rng, 2, 3);
    let probe_seed = rng.random::<u64>();
    finite_diff_check(
        |tape: &mut Tape, p: &BoundParams| {
            let mut r = ChaCha8Rng::seed_from_u64(probe_seed);
            let (_, att) = cga::cga_forward(tape, p, p.var("input.fx")?, p.var("input.vq")?, AttentionMode::Cross)?;
            probe(tape, att.output, &mut r)
        },
        &store,
        opts,
    )
}

fn check_cst(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 2);
    // the transformer reads only the projections, not the query or value maps
    let mut store = ParamStore::new();
    for (name, t) in cga_fixture(&mut rng, 3, 3).iter() {
        if !name.starts_with("cga.query") && !name.starts_with("cga.value") {
            store.insert(name, t.clone());
        }
    }
    let mut loc = ParamStore::new();
    cst::init_cst(&mut loc, 4);
    randomize(&mut loc, 0.8, &mut rng);
    for (name, t) in loc.iter() {
        store.insert(name, t.clone());
    }
    let probe_seed = rng.random::<u64>();
    finite_diff_check(
        |tape: &mut Tape, p: &BoundParams| {
            let mut r = ChaCha8Rng::seed_from_u64(probe_seed);
            let fx = p.var("input.fx")?;
            let proj = cga::project(tape, p, fx, p.var("input.vq")?)?;
            let out = cst::cst_forward(tape, p, &proj, fx, TransformMode::Learned)?;
            let a = probe(tape, out.e1, &mut r)?;
            let b = probe(tape, out.e2, &mut r)?;
            tape.add(a, b)
        },
        &store,
        opts,
    )
}

/// The model configuration used by the full-model check.
pub fn micro_model_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        image: micro_image(),
        question: micro_question(),
        classifier_hidden: 5,
        fusion: Fusion::Product,
        attention: AttentionMode::Cross,
        transform: TransformMode::Learned,
        vocab_size: 6,
        num_answers: 3,
    }
}

fn check_model(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let cfg = micro_model_config();
    let mut rng = ChaCha8Rng::seed_from_u64(SEED + 3);
    let mut store = model::init_params(&cfg, SEED).map_err(|e| crate::autodiff::AutodiffError::InvalidArgument(e.to_string()))?;
    randomize(&mut store, 0.5, &mut rng);
    let images = Tensor::new(vec![2, 3, 8, 8], (0..384).map(|_| rng.random::<f64>()).collect())?;
    let batch = Batch { images, image_of: vec![0, 1], questions: questions() };
    let labels = [2, 0];
    finite_diff_check(
        |tape: &mut Tape, p: &BoundParams| {
            let out = model::forward(tape, p, &cfg, &batch).map_err(|e| match e {
                model::ModelError::Autodiff(a) => a,
                other => crate::autodiff::AutodiffError::InvalidArgument(other.to_string()),
            })?;
            let losses = tape.cross_entropy(out.logits, &labels)?;
            tape.sum(losses)
        },
        &store,
        opts,
    )
}

/// Runs the finite-difference check for one component at step 1e-5 and
/// tolerance 1e-4 unless `opts` says otherwise.
pub fn check_module(module: CheckModule, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    match module {
        CheckModule::Encoders => check_encoders(opts),
        CheckModule::Cga => check_cga(opts),
        CheckModule::Cst => check_cst(opts),
        CheckModule::Model => check_model(opts),
    }
}
