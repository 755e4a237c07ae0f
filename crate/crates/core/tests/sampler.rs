//! The bilinear sampler checked against a direct summation over every source
//! pixel with the kernel `max(0, 1 - |d|)` on each axis.

use mlvqa_core::autodiff::{ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Reference output for one theta row per sample, computed without any of the
/// sampler's corner bookkeeping.
fn loop_oracle(x: &Tensor, theta: &[[f64; 4]]) -> Vec<f64> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let base = |i: usize, size: usize| if size == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (size - 1) as f64 };
    let to_pixel = |u: f64, size: usize| if size == 1 { 0.0 } else { (u + 1.0) * (size - 1) as f64 / 2.0 };
    let mut out = Vec::with_capacity(n * c * h * w);
    for (b, t) in theta.iter().enumerate().take(n) {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let xs = to_pixel(t[0] * base(j, w) + t[2], w);
                    let ys = to_pixel(t[1] * base(i, h) + t[3], h);
                    let mut v = 0.0;
                    for row in 0..h {
                        for col in 0..w {
                            let k = (1.0 - (xs - col as f64).abs()).max(0.0) * (1.0 - (ys - row as f64).abs()).max(0.0);
                            v += x.data()[((b * c + ch) * h + row) * w + col] * k;
                        }
                    }
                    out.push(v);
                }
            }
        }
    }
    out
}

fn sample(x: &Tensor, theta: &[[f64; 4]]) -> Tensor {
    let s = x.shape().to_vec();
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let flat: Vec<f64> = theta.iter().flatten().copied().collect();
    let tv = tape.constant(Tensor::new(vec![theta.len(), 4], flat).unwrap()).unwrap();
    let grid = tape.affine_grid(tv, s[2], s[3]).unwrap();
    let out = tape.bilinear_sample(xv, grid).unwrap();
    tape.value(out).unwrap().clone()
}

fn random_case(rng: &mut ChaCha8Rng) -> (Tensor, Vec<[f64; 4]>) {
    let c = rng.random_range(1..=4);
    let h = rng.random_range(1..=6);
    let w = rng.random_range(1..=6);
    let data = (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x = Tensor::new(vec![1, c, h, w], data).unwrap();
    let theta = [rng.random_range(0.0..1.5), rng.random_range(0.0..1.5), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
    (x, vec![theta])
}

#[test]
fn thousand_random_cases_match_the_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    for case in 0..1000 {
        let (x, theta) = random_case(&mut rng);
        let fast = sample(&x, &theta);
        let slow = loop_oracle(&x, &theta);
        for (a, b) in fast.data().iter().zip(&slow) {
            let d = (a - b).abs();
            worst = worst.max(d);
            assert!(d <= 1e-12, "case {case}: {a} vs {b} for shape {:?}, theta {:?}", x.shape(), theta[0]);
        }
    }
    println!("worst sampler deviation {worst:e}");
}

#[test]
fn identity_transform_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..200 {
        let (x, _) = random_case(&mut rng);
        let out = sample(&x, &[[1.0, 1.0, 0.0, 0.0]]);
        assert_eq!(out.data(), x.data());
    }
}

#[test]
fn region_fully_outside_samples_zero() {
    let x = Tensor::full(&[1, 2, 4, 4], 3.0);
    let out = sample(&x, &[[0.2, 0.2, 3.0, -3.0]]);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn halfway_between_two_pixels_averages_them() {
    // a 1x2 row sampled with scale 0: every output lands on x = 0, halfway between
    let x = Tensor::new(vec![1, 1, 1, 2], vec![1.0, 5.0]).unwrap();
    let out = sample(&x, &[[0.0, 1.0, 0.0, 0.0]]);
    assert_eq!(out.data(), &[3.0, 3.0]);
}

#[test]
fn batch_rows_use_their_own_transform() {
    let x = Tensor::new(vec![2, 1, 1, 3], vec![1.0, 2.0, 3.0, 10.0, 20.0, 30.0]).unwrap();
    let theta = [[1.0, 1.0, 0.0, 0.0], [0.0, 1.0, 1.0, 0.0]];
    let out = sample(&x, &theta);
    assert_eq!(out.data(), &[1.0, 2.0, 3.0, 30.0, 30.0, 30.0]);
    assert_eq!(loop_oracle(&x, &theta), out.data());
}

#[test]
fn theta_gradient_matches_central_differences_off_the_lattice() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::new(vec![1, 2, 5, 4], (0..40).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let theta = [0.73, 0.61, 0.137, -0.211];
    let loss = |t: &[f64; 4]| -> f64 { sample(&x, &[*t]).data().iter().enumerate().map(|(i, v)| v * (1.0 + i as f64 * 0.1)).sum() };

    let mut store = ParamStore::new();
    store.insert("theta", Tensor::new(vec![1, 4], theta.to_vec()).unwrap());
    let mut tape = Tape::new();
    let p = store.bind(&mut tape, true).unwrap();
    let xv = tape.constant(x.clone()).unwrap();
    let grid = tape.affine_grid(p.var("theta").unwrap(), 5, 4).unwrap();
    let out = tape.bilinear_sample(xv, grid).unwrap();
    let n = tape.value(out).unwrap().len();
    let wts = tape.constant(Tensor::new(vec![1, 2, 5, 4], (0..n).map(|i| 1.0 + i as f64 * 0.1).collect()).unwrap()).unwrap();
    let prod = tape.mul(out, wts).unwrap();
    let total = tape.sum(prod).unwrap();
    let grads = p.gradients(&tape, total).unwrap();
    let analytic = grads.get("theta").unwrap().data().to_vec();

    for k in 0..4 {
        let h = 1e-6;
        let (mut up, mut down) = (theta, theta);
        up[k] += h;
        down[k] -= h;
        let numeric = (loss(&up) - loss(&down)) / (2.0 * h);
        assert!((numeric - analytic[k]).abs() < 1e-6 * (1.0 + numeric.abs()), "theta[{k}]: {numeric} vs {}", analytic[k]);
    }
}

proptest! {
    #[test]
    fn interior_samples_of_a_constant_map_are_constant(
        c in 1usize..4, h in 2usize..7, w in 2usize..7, value in -5.0f64..5.0,
        s1 in 0.0f64..0.6, s2 in 0.0f64..0.6, tx in -0.4f64..0.4, ty in -0.4f64..0.4,
    ) {
        // the sampled region stays inside [-1, 1], where the kernel weights sum to 1
        let x = Tensor::full(&[1, c, h, w], value);
        let out = sample(&x, &[[s1, s2, tx, ty]]);
        for &v in out.data() {
            prop_assert!((v - value).abs() <= 1e-12 * (1.0 + value.abs()));
        }
    }

    #[test]
    fn sampling_is_linear_in_the_feature_map(
        seed in any::<u64>(), alpha in -3.0f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, theta) = random_case(&mut rng);
        let y = Tensor::new(x.shape().to_vec(), (0..x.len()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let combo = Tensor::new(x.shape().to_vec(), x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + b).collect()).unwrap();
        let lhs = sample(&combo, &theta);
        let (sx, sy) = (sample(&x, &theta), sample(&y, &theta));
        for ((l, a), b) in lhs.data().iter().zip(sx.data()).zip(sy.data()) {
            prop_assert!((l - (alpha * a + b)).abs() <= 1e-10);
        }
    }

    #[test]
    fn outputs_stay_within_the_input_range_scaled_by_coverage(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (x, theta) = random_case(&mut rng);
        let bound = x.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for &v in sample(&x, &theta).data() {
            prop_assert!(v.abs() <= bound + 1e-12);
        }
    }
}
