use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use mlvqa_bench::{model_fixture, random_tensor};
use mlvqa_core::model;
use mlvqa_core::{ParamStore, Tape, Tensor};

fn gemm(c: &mut Criterion) {
    let mut group = c.benchmark_group("matmul");
    for n in [64, 128, 256] {
        let a = random_tensor(&[n, n], 1);
        let b = random_tensor(&[n, n], 2);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let mut tape = Tape::new();
                let (x, y) = (tape.constant(a.clone()).unwrap(), tape.constant(b.clone()).unwrap());
                tape.matmul(x, y, false, false).unwrap()
            })
        });
    }
    group.finish();
}

fn conv(c: &mut Criterion) {
    let x = random_tensor(&[16, 16, 32, 32], 3);
    let mut store = ParamStore::new();
    store.insert("w", random_tensor(&[32, 16, 3, 3], 4));
    store.insert("b", Tensor::zeros(&[32]));
    c.bench_function("conv2d forward+backward 16x16x32x32", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape, true).unwrap();
            let xv = tape.constant(x.clone()).unwrap();
            let y = tape.conv2d(xv, p.var("w").unwrap(), Some(p.var("b").unwrap()), 2, 1).unwrap();
            let s = tape.sum(y).unwrap();
            p.gradients(&tape, s).unwrap()
        })
    });
}

fn sampler(c: &mut Criterion) {
    let x = random_tensor(&[64, 64, 8, 8], 5);
    let theta = Tensor::new(vec![64, 4], (0..64).flat_map(|i| [0.5 + i as f64 / 128.0, 0.7, 0.1, -0.2]).collect()).unwrap();
    c.bench_function("affine grid + bilinear sample 64x64x8x8", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone()).unwrap();
            let tv = tape.constant(theta.clone()).unwrap();
            let grid = tape.affine_grid(tv, 8, 8).unwrap();
            tape.bilinear_sample(xv, grid).unwrap()
        })
    });
}

fn forward(c: &mut Criterion) {
    let mut group = c.benchmark_group("model");
    group.sample_size(10);
    let (cfg, params, batch) = model_fixture(16);
    group.bench_function("forward batch 16", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, false).unwrap();
            model::forward(&mut tape, &p, &cfg, &batch).unwrap().logits
        })
    });
    let labels: Vec<usize> = (0..16).map(|i| i % 14).collect();
    group.bench_function("forward+backward batch 16", |bench| {
        bench.iter(|| {
            let mut tape = Tape::new();
            let p = params.bind(&mut tape, true).unwrap();
            let out = model::forward(&mut tape, &p, &cfg, &batch).unwrap();
            let losses = model::sample_loss(&mut tape, out.logits, &labels).unwrap();
            let total = tape.sum(losses).unwrap();
            p.gradients(&tape, total).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, gemm, conv, sampler, forward);
criterion_main!(benches);
