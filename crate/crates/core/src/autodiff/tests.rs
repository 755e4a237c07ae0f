use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an arbitrary output with fixed random weights to get a scalar.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(out)?.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = tape.constant(random_tensor(&mut rng, &shape))?;
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check<F>(params: ParamStore, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &BoundParams) -> Result<Var>,
{
    let report = finite_diff_check(f, &params, &GradCheckOptions::default()).unwrap();
    assert!(report.passed(), "{report:#?}");
    report
}

fn store(entries: &[(&str, Tensor)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (k, v) in entries {
        s.insert(*k, v.clone());
    }
    s
}

#[test]
fn power_rule() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0)).unwrap();
    let y = tape.mul(x, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[6.0]);
}

#[test]
fn product_rule() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::scalar(2.0)).unwrap();
    let b = tape.param(Tensor::scalar(5.0)).unwrap();
    let y = tape.mul(a, b).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[5.0]);
    assert_eq!(g.get(b).unwrap().data(), &[2.0]);
}

#[test]
fn dead_relu_has_zero_gradient() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(-2.0)).unwrap();
    let y = tape.relu(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0]);
}

#[test]
fn relu_gradient_at_zero_is_zero() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.0)).unwrap();
    let y = tape.relu(x).unwrap();
    assert_eq!(tape.backward(y).unwrap().get(x).unwrap().data(), &[0.0]);
}

#[test]
fn backward_rejects_non_scalar_and_foreign_outputs() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(&[1.0, 2.0])).unwrap();
    assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarOutput(_))));

    let mut other = Tape::new();
    let z = other.param(Tensor::scalar(1.0)).unwrap();
    assert!(matches!(tape.backward(z), Err(AutodiffError::ForeignTensor)));
}

#[test]
fn fan_out_accumulates() {
    // y = tanh(x) + x^2, dy/dx = 1 - tanh^2 + 2x
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.7)).unwrap();
    let a = tape.tanh(x).unwrap();
    let b = tape.mul(x, x).unwrap();
    let y = tape.add(a, b).unwrap();
    let g = tape.backward(y).unwrap().get(x).unwrap().data()[0];
    let expected = 1.0 - 0.7f64.tanh().powi(2) + 1.4;
    assert!((g - expected).abs() < 1e-15);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(&[1.0, 1.0])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::vector(&[0.0, 3f64.ln()])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    let d = tape.value(y).unwrap().data();
    assert!((d[0] - 0.25).abs() < 1e-15 && (d[1] - 0.75).abs() < 1e-15);

    let x = tape.constant(Tensor::vector(&[1000.0, 1000.0])).unwrap();
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[0.5, 0.5]);
}

#[test]
fn softmax_rejects_bad_axis() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 0])).unwrap();
    assert!(matches!(tape.softmax(x, 1), Err(AutodiffError::EmptyAxis { .. })));
    assert!(matches!(tape.softmax(x, 2), Err(AutodiffError::InvalidAxis { .. })));
}

#[test]
fn l2_normalize_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(&[3.0, 4.0])).unwrap();
    let y = tape.l2_normalize(x, 0, 1e-12).unwrap();
    let d = tape.value(y).unwrap().data();
    assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);

    let x = tape.constant(Tensor::vector(&[0.0, 0.0])).unwrap();
    let y = tape.l2_normalize(x, 0, 1e-12).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[0.0, 0.0]);

    let x = tape.constant(Tensor::vector(&[5.0])).unwrap();
    let y = tape.l2_normalize(x, 0, 1e-12).unwrap();
    assert_eq!(tape.value(y).unwrap().data(), &[1.0]);

    assert!(tape.l2_normalize(x, 0, 0.0).is_err());
}

#[test]
fn non_finite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(f64::MAX)).unwrap();
    assert!(matches!(tape.scale_shift(x, 10.0, 0.0), Err(AutodiffError::NonFinite { .. })));
}

#[test]
fn quadratic_is_exact_under_central_differences() {
    let params = store(&[("x", Tensor::scalar(1.0))]);
    let report = check(params, |tape, p| {
        let x = p.var("x")?;
        tape.mul(x, x)
    });
    assert!(report.max_rel_error() < 1e-10);
    assert_eq!(report.blocks[0].checked, 1);
}

#[test]
fn relu_kink_is_excluded() {
    let params = store(&[("x", Tensor::scalar(0.0))]);
    let report = finite_diff_check(|tape, p| tape.relu(p.var("x")?), &params, &GradCheckOptions::default()).unwrap();
    assert_eq!(report.blocks[0].excluded, 1);
    assert_eq!(report.blocks[0].checked, 0);
}

#[test]
fn step_out_of_range_is_rejected() {
    let params = store(&[("x", Tensor::scalar(0.5))]);
    let opts = GradCheckOptions { step: 1e-2, ..Default::default() };
    assert!(finite_diff_check(|tape, p| tape.tanh(p.var("x")?), &params, &opts).is_err());
}

#[test]
fn nondeterministic_loss_is_detected() {
    use std::cell::Cell;
    let calls = Cell::new(0.0);
    let params = store(&[("x", Tensor::scalar(0.5))]);
    let result = finite_diff_check(
        |tape, p| {
            calls.set(calls.get() + 1.0);
            let shift = tape.constant(Tensor::scalar(calls.get()))?;
            tape.add(p.var("x")?, shift)
        },
        &params,
        &GradCheckOptions::default(),
    );
    assert!(matches!(result, Err(AutodiffError::NonDeterministic { .. })));
}

#[test]
fn elementwise_primitives_match_finite_differences() {
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = store(&[("a", random_tensor(&mut rng, &[3, 4])), ("b", random_tensor(&mut rng, &[3, 4]))]);
        check(params, move |tape, p| {
            let (a, b) = (p.var("a")?, p.var("b")?);
            let s = tape.add(a, b)?;
            let d = tape.sub(a, b)?;
            let m = tape.mul(s, d)?;
            let t = tape.tanh(m)?;
            let g = tape.sigmoid(s)?;
            let sc = tape.scale_shift(g, -1.5, 0.3)?;
            let r = tape.relu(sc)?;
            let total = tape.add(t, r)?;
            project(tape, total, seed + 100)
        });
    }
}

#[test]
fn matmul_variants_match_finite_differences() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a_shape = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let b_shape = if tb { [2, 5, 4] } else { [2, 4, 5] };
        let params = store(&[("a", random_tensor(&mut rng, &a_shape)), ("b", random_tensor(&mut rng, &b_shape))]);
        check(params, move |tape, p| {
            let y = tape.matmul(p.var("a")?, p.var("b")?, ta, tb)?;
            project(tape, y, 3)
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = store(&[("a", random_tensor(&mut rng, &[3, 4]))]);
    check(params, |tape, p| {
        let a = p.var("a")?;
        // a a^T exercises both operands sharing one node
        let y = tape.matmul(a, a, false, true)?;
        project(tape, y, 4)
    });
}

#[test]
fn linear_and_conv_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let params = store(&[
        ("x", random_tensor(&mut rng, &[3, 5])),
        ("w", random_tensor(&mut rng, &[4, 5])),
        ("b", random_tensor(&mut rng, &[4])),
    ]);
    check(params, |tape, p| {
        let y = tape.linear(p.var("x")?, p.var("w")?, Some(p.var("b")?))?;
        project(tape, y, 5)
    });

    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0), (2, 2, 0)] {
        let mut rng = ChaCha8Rng::seed_from_u64(12 + k as u64);
        let params = store(&[
            ("x", random_tensor(&mut rng, &[2, 3, 6, 5])),
            ("w", random_tensor(&mut rng, &[4, 3, k, k])),
            ("b", random_tensor(&mut rng, &[4])),
        ]);
        check(params, move |tape, p| {
            let y = tape.conv2d(p.var("x")?, p.var("w")?, Some(p.var("b")?), stride, pad)?;
            project(tape, y, 6)
        });
    }
}

#[test]
fn conv2d_matches_direct_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let x = random_tensor(&mut rng, &[2, 2, 5, 5]);
    let w = random_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = random_tensor(&mut rng, &[3]);
    let mut tape = Tape::new();
    let (vx, vw, vb) = (tape.constant(x.clone()).unwrap(), tape.constant(w.clone()).unwrap(), tape.constant(b.clone()).unwrap());
    let y = tape.conv2d(vx, vw, Some(vb), 2, 1).unwrap();
    let got = tape.value(y).unwrap();
    assert_eq!(got.shape(), &[2, 3, 3, 3]);
    for n in 0..2 {
        for co in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b.data()[co];
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..5).contains(&ix) {
                                    acc += x.data()[((n * 2 + ci) * 5 + iy as usize) * 5 + ix as usize] * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let v = got.data()[((n * 3 + co) * 3 + oy) * 3 + ox];
                    assert!((v - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn reductions_and_reshapes_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let params = store(&[("x", random_tensor(&mut rng, &[2, 4, 3, 3])), ("v", random_tensor(&mut rng, &[2, 4]))]);
    check(params, |tape, p| {
        let x = tape.relu(p.var("x")?)?;
        let v = tape.broadcast_spatial(p.var("v")?, 3, 3)?;
        let s = tape.add(x, v)?;
        let n = tape.l2_normalize(s, 1, 1e-12)?;
        let (lo, hi) = tape.split_half(n, 1)?;
        let joined = tape.concat(&[hi, lo, hi], 1)?;
        let pooled = tape.global_avg_pool(joined)?;
        let flat = tape.reshape(pooled, &[2, 2, 3])?;
        let sm = tape.softmax(flat, 2)?;
        let g = tape.gather(sm, &[1, 0, 1])?;
        project(tape, g, 9)
    });
}

#[test]
fn cross_entropy_and_means_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let params = store(&[("z", random_tensor(&mut rng, &[3, 5]))]);
    check(params, |tape, p| {
        let l = tape.cross_entropy(p.var("z")?, &[0, 4, 2])?;
        let w = tape.constant(Tensor::vector(&[0.2, 1.0, 0.5]))?;
        let wl = tape.mul(l, w)?;
        let s = tape.sum(wl)?;
        let m = tape.mean(l)?;
        tape.add(s, m)
    });
}

#[test]
fn sampler_and_grid_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let theta = Tensor::new(vec![2, 4], vec![0.8, 0.6, 0.13, -0.21, 1.1, 0.7, -0.3, 0.27]).unwrap();
    let params = store(&[("x", random_tensor(&mut rng, &[2, 3, 5, 4])), ("theta", theta)]);
    check(params, |tape, p| {
        let grid = tape.affine_grid(p.var("theta")?, 4, 3)?;
        let y = tape.bilinear_sample(p.var("x")?, grid)?;
        project(tape, y, 10)
    });
}

#[test]
fn replayed_backward_is_bit_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut tape = Tape::new();
    let x = tape.param(random_tensor(&mut rng, &[2, 3, 4, 4])).unwrap();
    let w = tape.param(random_tensor(&mut rng, &[3, 3, 3, 3])).unwrap();
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    let y = tape.tanh(y).unwrap();
    let out = project(&mut tape, y, 1).unwrap();
    let g1 = tape.backward(out).unwrap();
    let g2 = tape.backward(out).unwrap();
    for v in [x, w] {
        let (a, b) = (g1.get(v).unwrap(), g2.get(v).unwrap());
        assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one(values in prop::collection::vec(-50.0f64..50.0, 1..24), rows in 1usize..4) {
        let cols = values.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| values.iter().map(move |v| v * (r as f64 + 1.0))).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap()).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        for row in tape.value(y).unwrap().data().chunks(cols) {
            prop_assert!(row.iter().all(|&p| p >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn l2_normalize_gives_unit_rows(values in prop::collection::vec(-10.0f64..10.0, 2..16)) {
        prop_assume!(values.iter().map(|v| v * v).sum::<f64>().sqrt() >= 1e-12);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(&values)).unwrap();
        let y = tape.l2_normalize(x, 0, 1e-12).unwrap();
        let norm = tape.value(y).unwrap().data().iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!((norm - 1.0).abs() < 1e-12);
    }
}
