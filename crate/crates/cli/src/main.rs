mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mlvqa_core::checks::CheckModule;
use mlvqa_core::{CurriculumPrior, Fusion, OptimizerKind, Split, Strategy};

/// Failure classes mapped to process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration (exit 2).
    Usage(String),
    /// Data, I/O, or numerical failure (exit 1).
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

#[derive(Parser, Debug)]
#[command(name = "mlvqa", version, about = "Synthetic VQA with cross-modal attention and self-paced curriculum training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model and write a run directory.
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset split.
    Eval(EvalArgs),
    /// Check analytic gradients against central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    /// Output directory (must not exist).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub scenes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub grid: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    /// Pixel noise amplitude in 0..=255 units.
    #[arg(long)]
    pub noise: Option<u8>,
    /// Questions per scene for rural_urban,presence,comparison,area,count.
    #[arg(long)]
    pub per_type: Option<PerType>,
    /// File of key=value lines; explicit flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug)]
pub struct PerType(pub [usize; 5]);

impl std::str::FromStr for PerType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<usize> = s.split(',').map(|p| p.trim().parse().map_err(|_| format!("invalid count {p:?}"))).collect::<Result<_, _>>()?;
        let arr: [usize; 5] = parts.try_into().map_err(|_| "expected five comma-separated counts".to_string())?;
        Ok(PerType(arr))
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum AttentionArg {
    Cross,
    Uniform,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum TransformArg {
    Learned,
    Identity,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory to create (must not exist).
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// adaptive (Adam) or sgd.
    #[arg(long)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub cl_epochs: Option<usize>,
    #[arg(long)]
    pub tau0: Option<f64>,
    /// Prior weights as type:weight pairs, e.g. `presence:1,count:4`.
    #[arg(long)]
    pub priors: Option<CurriculumPrior>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub attention: Option<AttentionArg>,
    #[arg(long, value_enum)]
    pub transform: Option<TransformArg>,
    #[arg(long)]
    pub fusion: Option<Fusion>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Run directory written by `train`.
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Parameter file inside the run directory.
    #[arg(long, default_value = "model.bin")]
    pub model: String,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Where to write the metrics CSV (printed either way).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Directory for attention maps, transform parameters, and overlay images.
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// Number of samples to export.
    #[arg(long, default_value_t = 8)]
    pub export_limit: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Fault {
    SamplerSign,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// Restrict the check to one module.
    #[arg(long)]
    pub module: Option<CheckModule>,
    #[arg(long, default_value_t = 1e-5)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, value_enum, hide = true)]
    pub inject_fault: Option<Fault>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
