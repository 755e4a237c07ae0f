//! Acceptance suite. Runs every criterion in order, prints one line per
//! criterion, and exits non-zero if any of them fails.
//!
//! Pass criterion numbers as arguments to run a subset, e.g.
//! `cargo test -p mlvqa-cli --test acceptance -- 2 3`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use mlvqa_core::autodiff::{Tape, Tensor};
use mlvqa_core::spcl::{init_curriculum, ranking_scores, spl_weight, update_pace, CurriculumPrior};
use mlvqa_core::synthdata::{self, read_dataset, write_dataset};
use mlvqa_core::{GeneratorConfig, QuestionType};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRADCHECK_TOLERANCE: f64 = 1e-4;
const GRADCHECK_SECONDS: f64 = 60.0;
const SAMPLER_CASES: usize = 1000;
const SAMPLER_TOLERANCE: f64 = 1e-12;
const WEIGHT_CASES: usize = 1000;
const GRID_STEP: f64 = 1e-4;
const WEIGHT_TOLERANCE: f64 = 1e-4;
const REGION_CASES: usize = 100;
const FINAL_INCLUSION: f64 = 0.99;
const CL_EPOCHS: usize = 15;
const SEEDS: [u64; 3] = [0, 1, 2];
const EPOCHS: usize = 60;
const RUN_SECONDS: f64 = 900.0;
const PRESENCE_TARGET: f64 = 0.90;
const SPCL_MARGIN: f64 = 0.005;
const ABLATION_MIN_SEEDS: usize = 2;
const ROUND_TRIP_TRIPLETS: usize = 1000;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

fn mlvqa(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mlvqa")).args(args).env("RUST_LOG", "warn").output().expect("binary runs")
}

fn ok(out: &Output, what: &str) {
    assert!(out.status.success(), "{what} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().expect("utf-8 path")
}

/// Shared state: the default dataset and the training runs, created on first use.
struct Workspace {
    root: tempfile::TempDir,
    data: Option<PathBuf>,
    runs: Option<Vec<RunResult>>,
}

struct RunResult {
    seed: u64,
    variant: &'static str,
    seconds: f64,
    test: BTreeMap<String, f64>,
    trace: Vec<BTreeMap<String, String>>,
}

impl RunResult {
    fn oa(&self) -> f64 {
        self.test["OA"]
    }
}

const VARIANTS: [(&str, &[&str]); 3] = [
    ("shuffle", &["--strategy", "shuffle"]),
    ("spcl", &["--strategy", "spcl"]),
    ("ablation", &["--strategy", "spcl", "--attention", "uniform", "--transform", "identity"]),
];

impl Workspace {
    fn data(&mut self) -> PathBuf {
        if self.data.is_none() {
            let dir = self.root.path().join("data");
            ok(&mlvqa(&["generate", "--out", p(&dir)]), "generate");
            self.data = Some(dir);
        }
        self.data.clone().unwrap()
    }

    fn runs(&mut self) -> &[RunResult] {
        if self.runs.is_none() {
            let data = self.data();
            let mut runs = Vec::new();
            for seed in SEEDS {
                for (variant, flags) in VARIANTS {
                    let out = self.root.path().join(format!("{variant}-{seed}"));
                    let seed_s = seed.to_string();
                    let epochs = EPOCHS.to_string();
                    let mut args = vec!["train", "--data", p(&data), "--out", p(&out), "--seed", &seed_s, "--epochs", &epochs];
                    args.extend_from_slice(flags);
                    let start = Instant::now();
                    ok(&mlvqa(&args), &format!("{variant} seed {seed}"));
                    let seconds = start.elapsed().as_secs_f64();
                    let test = read_metrics(&out.join("metrics.csv"));
                    let trace = read_csv(&out.join("trace.csv"));
                    println!("    run {variant:<8} seed {seed}: test OA {:.4} presence {:.4} ({seconds:.0}s)", test["OA"], test["presence"]);
                    runs.push(RunResult { seed, variant, seconds, test, trace });
                }
            }
            self.runs = Some(runs);
        }
        self.runs.as_deref().unwrap()
    }
}

fn read_metrics(path: &Path) -> BTreeMap<String, f64> {
    read_csv(path).into_iter().map(|row| (row["type"].clone(), row["accuracy"].parse().unwrap())).collect()
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    lines.map(|l| header.iter().map(|h| h.to_string()).zip(l.split(',').map(str::to_string)).collect()).collect()
}

fn gradient_correctness(_: &mut Workspace) -> Verdict {
    let tol = GRADCHECK_TOLERANCE.to_string();
    let start = Instant::now();
    let out = mlvqa(&["gradcheck", "--step", "1e-5", "--tolerance", &tol]);
    let seconds = start.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout);
    let modules: Vec<&str> = ["encoders", "cga", "cst", "model"].into_iter().filter(|m| text.lines().any(|l| l.starts_with(m) && l.ends_with("pass"))).collect();
    let errors: Vec<String> = text.lines().filter_map(|l| l.split("max relative error ").nth(1)).map(|r| r.split(' ').next().unwrap().to_string()).collect();
    verdict(
        out.status.success() && modules.len() == 4 && seconds < GRADCHECK_SECONDS,
        format!("modules passing {}/4, max rel errors [{}] < {GRADCHECK_TOLERANCE:e}, {seconds:.1}s < {GRADCHECK_SECONDS}s", modules.len(), errors.join(", ")),
    )
}

/// Direct summation of the bilinear kernel over every source pixel.
fn sampler_oracle(x: &Tensor, t: [f64; 4]) -> Vec<f64> {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let base = |i: usize, n: usize| if n == 1 { 0.0 } else { -1.0 + 2.0 * i as f64 / (n - 1) as f64 };
    let pixel = |u: f64, n: usize| if n == 1 { 0.0 } else { (u + 1.0) * (n - 1) as f64 / 2.0 };
    let mut out = Vec::new();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let (xs, ys) = (pixel(t[0] * base(j, w) + t[2], w), pixel(t[1] * base(i, h) + t[3], h));
                let mut v = 0.0;
                for row in 0..h {
                    for col in 0..w {
                        let k = (1.0 - (xs - col as f64).abs()).max(0.0) * (1.0 - (ys - row as f64).abs()).max(0.0);
                        v += x.data()[(ch * h + row) * w + col] * k;
                    }
                }
                out.push(v);
            }
        }
    }
    out
}

fn fast_sample(x: &Tensor, t: [f64; 4]) -> Vec<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone()).unwrap();
    let tv = tape.constant(Tensor::new(vec![1, 4], t.to_vec()).unwrap()).unwrap();
    let grid = tape.affine_grid(tv, x.shape()[2], x.shape()[3]).unwrap();
    let out = tape.bilinear_sample(xv, grid).unwrap();
    tape.value(out).unwrap().data().to_vec()
}

fn sampler_oracle_check(_: &mut Workspace) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5A3F);
    let mut worst = 0.0f64;
    let mut identity_exact = true;
    for _ in 0..SAMPLER_CASES {
        let (c, h, w) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=6));
        let x = Tensor::new(vec![1, c, h, w], (0..c * h * w).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap();
        let t = [rng.random_range(0.0..1.5), rng.random_range(0.0..1.5), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
        for (a, b) in fast_sample(&x, t).iter().zip(sampler_oracle(&x, t)) {
            worst = worst.max((a - b).abs());
        }
        identity_exact &= fast_sample(&x, [1.0, 1.0, 0.0, 0.0]) == x.data();
    }
    verdict(
        worst <= SAMPLER_TOLERANCE && identity_exact,
        format!("{SAMPLER_CASES} cases, max deviation {worst:.2e} <= {SAMPLER_TOLERANCE:e}, identity bit-exact: {identity_exact}"),
    )
}

fn closed_form_weight(_: &mut Workspace) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0x10AD);
    let steps = (1.0 / GRID_STEP).round() as usize;
    let mut worst = 0.0f64;
    for _ in 0..WEIGHT_CASES {
        let (loss, lambda) = (rng.random_range(0.0..6.0), rng.random_range(0.01..5.0));
        let f = |v: f64| v * loss + lambda * (v * v / 2.0 - v);
        let grid = (0..=steps).map(|i| i as f64 * GRID_STEP).min_by(|a, b| f(*a).total_cmp(&f(*b))).unwrap();
        worst = worst.max((spl_weight(loss, lambda).unwrap() - grid).abs());
    }
    verdict(worst <= WEIGHT_TOLERANCE, format!("{WEIGHT_CASES} cases, max deviation {worst:.2e} <= {WEIGHT_TOLERANCE:e}"))
}

fn pace_schedule(_: &mut Workspace) -> Verdict {
    let losses = [0.5, 1.0, 1.5, 2.0];
    let (k0, lambda0) = update_pace(&losses, 0).unwrap();
    let (k15, _) = update_pace(&losses, 15).unwrap();
    verdict(k0 == 0.5 && k15 == 0.6 && lambda0 == 1.25, format!("K(0) = {k0}, K(15) = {k15}, lambda(0) = {lambda0}"))
}

fn curriculum_region(_: &mut Workspace) -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0DE);
    let mut violations = 0;
    for _ in 0..REGION_CASES {
        let n = rng.random_range(1..300);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..5.0)).collect();
        let tau = rng.random_range(0.01..1.0);
        let v = init_curriculum(&a, tau).unwrap();
        let av: f64 = a.iter().zip(&v).map(|(x, y)| x * y).sum();
        violations += (av > tau * a.iter().sum::<f64>()) as usize;
    }
    let samples: Vec<(QuestionType, usize)> = (0..200).map(|i| (if i % 2 == 0 { QuestionType::Count } else { QuestionType::Presence }, 6)).collect();
    let a = ranking_scores(&samples, &CurriculumPrior::default()).unwrap();
    // sweep the budget so that both the all-presence and the mixed regimes are covered
    let mut ordered = true;
    for tau in [0.1, 0.2, 0.3, 0.5, 0.7, 0.9] {
        let v = init_curriculum(&a, tau).unwrap();
        let max_count = v.iter().step_by(2).cloned().fold(f64::NEG_INFINITY, f64::max);
        let min_presence = v.iter().skip(1).step_by(2).cloned().fold(f64::INFINITY, f64::min);
        ordered &= max_count <= min_presence;
    }
    verdict(
        violations == 0 && ordered,
        format!("{violations}/{REGION_CASES} budget violations, count weights <= presence weights at every budget: {ordered}"),
    )
}

fn curriculum_dynamics(ws: &mut Workspace) -> Verdict {
    let mut pass = true;
    let mut parts = Vec::new();
    for run in ws.runs().iter().filter(|r| r.variant == "spcl") {
        let prop = |row: &BTreeMap<String, String>, t: &str| row[&format!("prop_{t}")].parse::<f64>().unwrap();
        let early = &run.trace[..CL_EPOCHS];
        let mean = |t: &str| early.iter().map(|r| prop(r, t)).sum::<f64>() / CL_EPOCHS as f64;
        let (count, presence) = (mean("count"), mean("presence"));
        let last = run.trace.last().unwrap();
        let final_min = QuestionType::ALL.iter().map(|t| prop(last, t.as_str())).fold(f64::INFINITY, f64::min);
        pass &= count < presence && final_min >= FINAL_INCLUSION;
        parts.push(format!("seed {}: count {count:.3} < presence {presence:.3}, final min {final_min:.3} >= {FINAL_INCLUSION}", run.seed));
    }
    verdict(pass, parts.join("; "))
}

fn end_to_end(ws: &mut Workspace) -> Verdict {
    let runs = ws.runs();
    let of = |v: &'static str| runs.iter().filter(move |r| r.variant == v);
    let slowest = runs.iter().map(|r| r.seconds).fold(0.0, f64::max);
    let presence: Vec<f64> = of("shuffle").map(|r| r.test["presence"]).collect();
    let a = presence.iter().all(|&x| x >= PRESENCE_TARGET);
    let mean = |v: &'static str| of(v).map(RunResult::oa).sum::<f64>() / SEEDS.len() as f64;
    let (shuffle_oa, spcl_oa) = (mean("shuffle"), mean("spcl"));
    let b = spcl_oa >= shuffle_oa - SPCL_MARGIN;
    let drops = SEEDS
        .iter()
        .filter(|&&s| {
            let oa = |v: &'static str| of(v).find(|r| r.seed == s).unwrap().oa();
            oa("ablation") <= oa("spcl")
        })
        .count();
    let c = drops >= ABLATION_MIN_SEEDS;
    let fmt = |xs: &[f64]| xs.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    verdict(
        a && b && c && slowest < RUN_SECONDS,
        format!(
            "(a) shuffle presence {} >= {PRESENCE_TARGET} each: {}; (b) spcl OA {spcl_oa:.4} >= shuffle OA {shuffle_oa:.4} - {SPCL_MARGIN}: {}; \
             (c) ablation <= full on {drops}/3 seeds (need {ABLATION_MIN_SEEDS}): {}; slowest run {slowest:.0}s < {RUN_SECONDS}s",
            fmt(&presence),
            pass_word(a),
            pass_word(b),
            pass_word(c)
        ),
    )
}

fn determinism(ws: &mut Workspace) -> Verdict {
    let data = ws.data();
    let dirs = [ws.root.path().join("det-a"), ws.root.path().join("det-b")];
    for d in &dirs {
        let args = ["train", "--data", p(&data), "--out", p(d), "--strategy", "spcl", "--epochs", "4", "--cl-epochs", "2", "--seed", "11"];
        ok(&mlvqa(&args), "determinism run");
    }
    let files = ["trace.csv", "model.bin", "best.bin", "metrics.csv"];
    let same: Vec<&str> = files.into_iter().filter(|f| fs::read(dirs[0].join(f)).unwrap() == fs::read(dirs[1].join(f)).unwrap()).collect();
    verdict(same.len() == files.len(), format!("identical: {}/{} files ({})", same.len(), files.len(), same.join(", ")))
}

fn cells(grid: &str, phrase: &str) -> usize {
    let codes = match phrase.trim_end_matches('s') {
        "small building" => "s",
        "large building" => "b",
        "building" => "sb",
        "road" => "r",
        "water area" => "w",
        "tree" => "t",
        "field" => "f",
        other => panic!("unknown noun phrase {other:?}"),
    };
    grid.chars().filter(|c| codes.contains(*c)).count()
}

/// Answers a question from its text and the cell codes of the scene.
fn rule_answer(question: &str, grid: &str) -> String {
    let q = question.to_lowercase();
    let q = q.trim_end_matches('?');
    let yes = |b: bool| if b { "yes" } else { "no" }.to_string();
    let count = |n: usize| match n {
        0 => "zero".to_string(),
        1..=4 => n.to_string(),
        5..=10 => "5-10".to_string(),
        _ => "11+".to_string(),
    };
    if q == "is it a rural or an urban area" {
        return if cells(grid, "buildings") * 16 >= grid.len() { "urban" } else { "rural" }.into();
    }
    if let Some(x) = q.strip_prefix("is a ").and_then(|r| r.strip_suffix(" present")) {
        return yes(cells(grid, x) > 0);
    }
    if let Some((a, b)) = q.strip_prefix("are there more ").and_then(|r| r.split_once(" than ")) {
        return yes(cells(grid, a) > cells(grid, b));
    }
    if let Some(x) = q.strip_prefix("what is the amount of ") {
        return count(cells(grid, x));
    }
    if let Some(x) = q.strip_prefix("how many ").and_then(|r| r.strip_suffix(" are there")) {
        return count(cells(grid, x));
    }
    if let Some(x) = q.strip_prefix("what is the area covered by ") {
        return match cells(grid, x) {
            0 => "zero",
            1..=4 => "small",
            5..=12 => "medium",
            _ => "large",
        }
        .into();
    }
    panic!("question outside every template: {question:?}")
}

fn data_round_trip(ws: &mut Workspace) -> Verdict {
    let small = synthdata::generate(&GeneratorConfig { scenes: 170, seed: 21, ..GeneratorConfig::default() }).unwrap();
    let dir = ws.root.path().join("round-trip");
    write_dataset(&small, &dir).unwrap();
    let back = read_dataset(&dir).unwrap();
    let images_equal = small.images.iter().all(|(k, img)| back.images.get(k).is_some_and(|b| b.pixels() == img.pixels()));
    let identity = back == small && images_equal && small.triplets.len() >= ROUND_TRIP_TRIPLETS;

    let data = ws.data();
    let scenes: BTreeMap<String, String> = fs::read_to_string(data.join("scenes.tsv"))
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0].to_string(), f[1].to_string())
        })
        .collect();
    let (mut agree, mut total) = (0, 0);
    for line in fs::read_to_string(data.join("index.tsv")).unwrap().lines().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        agree += (rule_answer(f[2], &scenes[f[5]]) == f[3]) as usize;
        total += 1;
    }
    verdict(
        identity && agree == total && total > 0,
        format!("round trip of {} triplets identical: {identity}; rule evaluator agrees on {agree}/{total}", small.triplets.len()),
    )
}

fn pass_word(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "FAIL"
    }
}

type Criterion = fn(&mut Workspace) -> Verdict;

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(&str, Criterion); 9] = [
        ("gradient correctness", gradient_correctness),
        ("bilinear sampler oracle", sampler_oracle_check),
        ("closed-form weight oracle", closed_form_weight),
        ("pace schedule", pace_schedule),
        ("curriculum region", curriculum_region),
        ("curriculum dynamics", curriculum_dynamics),
        ("end-to-end training", end_to_end),
        ("determinism", determinism),
        ("data round trip", data_round_trip),
    ];
    let mut ws = Workspace { root: tempfile::tempdir().unwrap(), data: None, runs: None };
    let mut failed = Vec::new();
    for (i, (name, check)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let v = panic::catch_unwind(AssertUnwindSafe(|| check(&mut ws))).unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default();
            verdict(false, format!("panicked: {msg}"))
        });
        println!("criterion {n} {name}: {} | {} [{:.1}s]", if v.pass { "PASS" } else { "FAIL" }, v.detail, start.elapsed().as_secs_f64());
        if !v.pass {
            failed.push(n);
        }
    }
    // exit() skips destructors, so remove the scratch directory first
    drop(ws);
    if !failed.is_empty() {
        println!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
