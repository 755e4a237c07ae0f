use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};

use mlvqa_core::autodiff::{fault, GradCheckOptions, Tape};
use mlvqa_core::cga::{attention_map, attention_map_csv};
use mlvqa_core::checks::{check_module, CheckModule};
use mlvqa_core::cst::{overlay_rect, theta_csv};
use mlvqa_core::model::{self, build_vocabulary, init_params, load_params, save_params};
use mlvqa_core::synthdata::{self, read_dataset, write_dataset, SceneConfig, ANSWERS};
use mlvqa_core::train::{self, trace_csv};
use mlvqa_core::{
    AffineParams, AnswerSet, AttentionMode, EncodedSplit, GeneratorConfig, ModelConfig,
    QuestionType, Split, SpclConfig, Strategy, TrainConfig, TransformMode, Vocabulary, VqaModel,
};

use crate::config::{read_pairs, ConfigFile};
use crate::{AttentionArg, CliError, EvalArgs, GenerateArgs, GradcheckArgs, TrainArgs, TransformArg};

/// Builds a directory under a temporary name next to `out` and renames it into
/// place only if `build` succeeds, so `out` is either complete or absent.
fn atomic_dir(out: &Path, build: impl FnOnce(&Path) -> anyhow::Result<()>) -> Result<(), CliError> {
    if out.exists() {
        return Err(anyhow!("{} already exists", out.display()).into());
    }
    let name = out.file_name().ok_or_else(|| CliError::Usage(format!("invalid output path {}", out.display())))?;
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
    let tmp = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if tmp.exists() {
        fs::remove_dir_all(&tmp).with_context(|| format!("removing stale {}", tmp.display()))?;
    }
    fs::create_dir(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    if let Err(e) = build(&tmp) {
        let _ = fs::remove_dir_all(&tmp);
        return Err(e.into());
    }
    fs::rename(&tmp, out).with_context(|| format!("moving {} to {}", tmp.display(), out.display()))?;
    Ok(())
}

const GENERATE_KEYS: &[&str] = &["scenes", "seed", "grid", "image-size", "noise", "per-type"];

pub fn generate(args: GenerateArgs) -> Result<ExitCode, CliError> {
    let file = ConfigFile::load(args.config.as_deref())?;
    file.reject_unknown(GENERATE_KEYS)?;
    let defaults = GeneratorConfig::default();
    let cfg = GeneratorConfig {
        scenes: file.pick(args.scenes, "scenes", defaults.scenes)?,
        seed: file.pick(args.seed, "seed", defaults.seed)?,
        image_size: file.pick(args.image_size, "image-size", defaults.image_size)?,
        noise: file.pick(args.noise, "noise", defaults.noise)?,
        per_type_counts: file.pick(args.per_type, "per-type", crate::PerType(defaults.per_type_counts))?.0,
        scene: SceneConfig { grid: file.pick(args.grid, "grid", defaults.scene.grid)?, ..defaults.scene },
    };
    let data = synthdata::generate(&cfg).map_err(|e| match e {
        synthdata::DataError::InvalidConfig(m) => CliError::Usage(m),
        other => CliError::Runtime(other.into()),
    })?;
    atomic_dir(&args.out, |dir| Ok(write_dataset(&data, dir)?))?;

    println!("wrote {} triplets over {} scenes to {}", data.triplets.len(), data.scenes.len(), args.out.display());
    for split in [Split::Train, Split::Val, Split::Test] {
        let scenes = data.splits.values().filter(|&&s| s == split).count();
        println!("  {:<5} {:>4} scenes {:>5} triplets", split.as_str(), scenes, data.triplets_in(split).count());
    }
    for t in QuestionType::ALL {
        let mut hist: BTreeMap<usize, usize> = BTreeMap::new();
        for tr in data.triplets.iter().filter(|tr| tr.qtype == t) {
            let k = ANSWERS.iter().position(|a| *a == tr.answer).unwrap_or(usize::MAX);
            *hist.entry(k).or_default() += 1;
        }
        let total: usize = hist.values().sum();
        let parts: Vec<String> = hist.iter().map(|(&k, n)| format!("{}={n}", ANSWERS.get(k).copied().unwrap_or("?"))).collect();
        println!("  {:<11} {:>5}  {}", t.as_str(), total, parts.join(" "));
    }
    Ok(ExitCode::SUCCESS)
}

const TRAIN_KEYS: &[&str] =
    &["strategy", "epochs", "batch-size", "lr", "optimizer", "cl-epochs", "tau0", "priors", "seed", "attention", "transform", "fusion"];

fn model_key(k: &str) -> String {
    k.replace('_', "-")
}

fn attention_mode(a: AttentionArg) -> AttentionMode {
    match a {
        AttentionArg::Cross => AttentionMode::Cross,
        AttentionArg::Uniform => AttentionMode::Uniform,
    }
}

fn transform_mode(t: TransformArg) -> TransformMode {
    match t {
        TransformArg::Learned => TransformMode::Learned,
        TransformArg::Identity => TransformMode::Identity,
    }
}

fn resolve_train(args: &TrainArgs, file: &ConfigFile) -> Result<(TrainConfig, ModelConfig), CliError> {
    let model_keys: Vec<String> = ModelConfig::default().to_pairs().into_iter().map(|(k, _)| model_key(&k)).collect();
    let mut known: Vec<&str> = TRAIN_KEYS.to_vec();
    known.extend(model_keys.iter().map(String::as_str));
    file.reject_unknown(&known)?;

    let d = TrainConfig::default();
    let cfg = TrainConfig {
        spcl: SpclConfig {
            strategy: file.pick(args.strategy, "strategy", d.spcl.strategy)?,
            cl_epochs: file.pick(args.cl_epochs, "cl-epochs", d.spcl.cl_epochs)?,
            tau0: file.pick(args.tau0, "tau0", d.spcl.tau0)?,
        },
        epochs: file.pick(args.epochs, "epochs", d.epochs)?,
        batch_size: file.pick(args.batch_size, "batch-size", d.batch_size)?,
        lr: file.pick(args.lr, "lr", d.lr)?,
        optimizer: file.pick(args.optimizer, "optimizer", d.optimizer)?,
        prior: file.pick(args.priors.clone(), "priors", d.prior.clone())?,
        seed: file.pick(args.seed, "seed", d.seed)?,
    };
    cfg.validate().map_err(|e| CliError::Usage(e.to_string()))?;

    let mut pairs = BTreeMap::new();
    for (k, _) in ModelConfig::default().to_pairs() {
        if let Some(v) = file.pick::<String>(None, &model_key(&k), String::new()).ok().filter(|v| !v.is_empty()) {
            pairs.insert(k, v);
        }
    }
    let mut model = ModelConfig::from_pairs(&pairs).map_err(CliError::Usage)?;
    if let Some(a) = args.attention {
        model.attention = attention_mode(a);
    }
    if let Some(t) = args.transform {
        model.transform = transform_mode(t);
    }
    if let Some(f) = args.fusion {
        model.fusion = f;
    }
    Ok((cfg, model))
}

fn config_echo(cfg: &TrainConfig, model: &ModelConfig) -> String {
    let mut out = String::new();
    let train_pairs = [
        ("strategy", cfg.spcl.strategy.to_string()),
        ("epochs", cfg.epochs.to_string()),
        ("batch-size", cfg.batch_size.to_string()),
        ("lr", cfg.lr.to_string()),
        ("optimizer", cfg.optimizer.to_string()),
        ("cl-epochs", cfg.spcl.cl_epochs.to_string()),
        ("tau0", cfg.spcl.tau0.to_string()),
        ("priors", cfg.prior.to_string()),
        ("seed", cfg.seed.to_string()),
    ];
    for (k, v) in train_pairs {
        out.push_str(&format!("{k}={v}\n"));
    }
    for (k, v) in model.to_pairs() {
        out.push_str(&format!("{k}={v}\n"));
    }
    out
}

pub fn train(args: TrainArgs) -> Result<ExitCode, CliError> {
    let file = ConfigFile::load(args.config.as_deref())?;
    let (cfg, mut model_cfg) = resolve_train(&args, &file)?;
    let data = read_dataset(&args.data).with_context(|| format!("reading dataset {}", args.data.display()))?;
    let first = data.images.values().next().ok_or_else(|| anyhow!("dataset has no images"))?;
    model_cfg.image_size = first.height();
    let vocab = build_vocabulary(&data).map_err(anyhow::Error::from)?;
    let model = VqaModel::new(model_cfg, vocab, AnswerSet::default(), cfg.seed).map_err(anyhow::Error::from)?;
    let max_tokens = model.config.question.max_tokens;
    let encode = |split| EncodedSplit::encode(&data, split, &model.vocab, &model.answers, max_tokens).map_err(anyhow::Error::from);
    let (train_split, val_split, test_split) = (encode(Split::Train)?, encode(Split::Val)?, encode(Split::Test)?);
    if cfg.spcl.strategy == Strategy::Spcl {
        for s in &train_split.samples {
            cfg.prior.weight(s.qtype).map_err(|e| CliError::Usage(format!("strategy spcl: {e}")))?;
        }
    }
    log::info!(
        "training {} on {} samples ({} val, {} test), {} parameters",
        cfg.spcl.strategy,
        train_split.len(),
        val_split.len(),
        test_split.len(),
        model.params.num_scalars()
    );
    let start = Instant::now();
    let outcome = train::train(model, &train_split, &val_split, &cfg, |row| {
        log::info!(
            "epoch {:>3} {:<7} loss {:.4} val OA {:.4} AA {:.4} ({:.0}s)",
            row.record_epoch,
            row.phase,
            row.mean_loss,
            row.val.overall_accuracy(),
            row.val.average_accuracy(),
            start.elapsed().as_secs_f64()
        );
    })
    .map_err(anyhow::Error::from)?;
    let test = if test_split.is_empty() { None } else { Some(outcome.model.evaluate(&test_split).map_err(anyhow::Error::from)?) };
    log::info!("best validation OA at epoch {}", outcome.best_epoch);

    atomic_dir(&args.out, |dir| {
        fs::write(dir.join("config.txt"), config_echo(&cfg, &outcome.model.config))?;
        fs::write(dir.join("trace.csv"), trace_csv(&outcome.trace))?;
        if let Some(report) = &test {
            fs::write(dir.join("metrics.csv"), report.to_csv())?;
        } else {
            bail!("test split is empty; no metrics to write");
        }
        save_params(&outcome.model.params, &dir.join("model.bin"))?;
        save_params(&outcome.best.params, &dir.join("best.bin"))?;
        fs::write(dir.join("vocab.tsv"), outcome.model.vocab.to_tsv())?;
        fs::write(dir.join("answers.tsv"), outcome.model.answers.to_tsv())?;
        Ok(())
    })?;
    if let Some(report) = test {
        print!("{}", report.to_csv());
    }
    Ok(ExitCode::SUCCESS)
}

fn load_run(run: &Path, model_file: &str) -> anyhow::Result<VqaModel> {
    let read = |name: &str| fs::read_to_string(run.join(name)).with_context(|| format!("reading {}", run.join(name).display()));
    let config = ModelConfig::from_pairs(&read_pairs(&read("config.txt")?)).map_err(|e| anyhow!("config.txt: {e}"))?;
    let vocab = Vocabulary::from_tsv(&read("vocab.tsv")?)?;
    let answers = AnswerSet::from_tsv(&read("answers.tsv")?).map_err(|e| anyhow!(e))?;
    if config.vocab_size != vocab.len() || config.num_answers != answers.len() {
        bail!(
            "vocabulary mismatch: config expects {} tokens and {} answers, sidecar files have {} and {}",
            config.vocab_size,
            config.num_answers,
            vocab.len(),
            answers.len()
        );
    }
    let template = init_params(&config, 0)?;
    let path = run.join(model_file);
    let params = load_params(&path, &template).with_context(|| format!("loading {}", path.display()))?;
    Ok(VqaModel { config, params, vocab, answers })
}

pub fn eval(args: EvalArgs) -> Result<ExitCode, CliError> {
    let model = load_run(&args.run, &args.model)?;
    let data = read_dataset(&args.data).with_context(|| format!("reading dataset {}", args.data.display()))?;
    let split = EncodedSplit::encode(&data, args.split, &model.vocab, &model.answers, model.config.question.max_tokens)
        .context("vocabulary mismatch between model and dataset")?;
    if split.is_empty() {
        return Err(anyhow!("split {} has no samples", args.split.as_str()).into());
    }
    let report = model.evaluate(&split).map_err(anyhow::Error::from)?;
    let csv = report.to_csv();
    if let Some(out) = &args.out {
        fs::write(out, &csv).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{csv}");
    if let Some(dir) = &args.export {
        export(&model, &data, &split, dir, args.export_limit)?;
    }
    Ok(ExitCode::SUCCESS)
}

/// Writes per-sample attention maps, both transforms' parameters, and images
/// with the sampled regions outlined.
fn export(model: &VqaModel, data: &mlvqa_core::Dataset, split: &EncodedSplit, dir: &Path, limit: usize) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let indices: Vec<usize> = (0..split.len().min(limit)).collect();
    if indices.is_empty() {
        return Ok(());
    }
    let (batch, _) = split.batch(&indices)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, false)?;
    let out = model::forward(&mut tape, &p, &model.config, &batch)?;
    let fshape = tape.shape(out.features)?.to_vec();
    let (h, w) = (fshape[2], fshape[3]);
    if let Some(weights) = out.attention.weights {
        let weights = tape.value(weights)?;
        for (row, &i) in indices.iter().enumerate() {
            let map = attention_map(weights, row, h, w);
            fs::write(dir.join(format!("attention_{:05}.csv", split.samples[i].id)), attention_map_csv(&map, w))?;
        }
    }
    let thetas = match out.transform.thetas {
        Some((t1, t2)) => Some((tape.value(t1)?.clone(), tape.value(t2)?.clone())),
        None => None,
    };
    let per_sample = |t: &mlvqa_core::Tensor, row: usize| AffineParams::from_row(&t.data()[row * 4..row * 4 + 4]);
    let mut rows1 = Vec::new();
    let mut rows2 = Vec::new();
    for (row, &i) in indices.iter().enumerate() {
        let (a1, a2) = match &thetas {
            Some((t1, t2)) => (per_sample(t1, row), per_sample(t2, row)),
            None => (AffineParams::IDENTITY, AffineParams::IDENTITY),
        };
        let s = &split.samples[i];
        rows1.push((s.id, a1));
        rows2.push((s.id, a2));
        let triplet = data.triplets.iter().find(|t| t.id == s.id).ok_or_else(|| anyhow!("triplet {} vanished", s.id))?;
        let img = &data.images[&triplet.image];
        let drawn = overlay_rect(&overlay_rect(img, &a1, [255, 0, 255]), &a2, [0, 255, 255]);
        fs::write(dir.join(format!("overlay_{:05}.ppm", s.id)), drawn.to_ppm_bytes())?;
    }
    fs::write(dir.join("thetas_1.csv"), theta_csv(&rows1))?;
    fs::write(dir.join("thetas_2.csv"), theta_csv(&rows2))?;
    Ok(())
}

pub fn gradcheck(args: GradcheckArgs) -> Result<ExitCode, CliError> {
    if !(1e-7..=1e-3).contains(&args.step) {
        return Err(CliError::Usage(format!("--step must lie in [1e-7, 1e-3], got {}", args.step)));
    }
    let opts = GradCheckOptions { step: args.step, tolerance: args.tolerance, max_entries_per_block: None };
    let modules: Vec<CheckModule> = match args.module {
        Some(m) => vec![m],
        None => CheckModule::ALL.to_vec(),
    };
    if args.inject_fault.is_some() {
        fault::set_sampler_grad_sign_flip(true);
    }
    let start = Instant::now();
    let mut failed = Vec::new();
    for m in modules {
        let report = check_module(m, &opts).with_context(|| format!("gradient check of {m}"))?;
        let worst = report.blocks.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error));
        let verdict = if report.passed() { "pass" } else { "FAIL" };
        println!(
            "{m:<9} max relative error {:.3e} (worst block {}) {verdict}",
            report.max_rel_error(),
            worst.map(|b| b.name.as_str()).unwrap_or("-")
        );
        if !report.passed() {
            failed.push(m.as_str());
        }
    }
    println!("tolerance {:e}, step {:e}, {:.2}s", args.tolerance, args.step, start.elapsed().as_secs_f64());
    if failed.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradient check failed for: {}", failed.join(", "));
        Ok(ExitCode::from(1))
    }
}

