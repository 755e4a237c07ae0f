//! Fixtures shared by the kernel benchmarks.

use mlvqa_core::model::{init_params, Batch};
use mlvqa_core::{ModelConfig, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    uniform_tensor(shape, -1.0, 1.0, seed)
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape matches data")
}

/// Default-sized model with `batch` samples, each on its own 64x64 image.
pub fn model_fixture(batch: usize) -> (ModelConfig, ParamStore, Batch) {
    let cfg = ModelConfig { vocab_size: 40, num_answers: 14, ..ModelConfig::default() };
    let params = init_params(&cfg, 1).expect("valid config");
    let images = uniform_tensor(&[batch, 3, 64, 64], 0.0, 1.0, 2);
    let questions = (0..batch).map(|i| (0..6 + i % 4).map(|t| 2 + (i + t) % 38).collect()).collect();
    (cfg, params, Batch { images, image_of: (0..batch).collect(), questions })
}
