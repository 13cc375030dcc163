//! `citytft` command-line driver.
//!
//! Exit codes: 0 success, 1 other failure, 2 bad flags or configuration,
//! 3 unreadable or missing input, 4 training divergence, 5 normalization
//! statistics mismatch.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use citytft::model::ModelKind;
use citytft::Error;

#[derive(Debug, Parser)]
#[command(name = "citytft", version, about = "Building load surrogate: synthetic data, training, evaluation and prediction")]
pub struct Cli {
    /// Worker threads (default: all available cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Only print errors.
    #[arg(long, short, global = true)]
    pub quiet: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    SynthData(SynthArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Evaluate one or more checkpoints on a dataset split.
    Evaluate(EvaluateArgs),
    /// Predict a full-year load trace for the buildings in a CSV.
    Predict(PredictArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum KindArg {
    Tft,
    Rnn,
    Transformer,
}

impl From<KindArg> for ModelKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Tft => ModelKind::Tft,
            KindArg::Rnn => ModelKind::Rnn,
            KindArg::Transformer => ModelKind::Transformer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// One training and one test climate.
    Default,
    /// Two training climates and one held-out test climate.
    Benchmark,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// JSON synthetic-data configuration; overrides --preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "default")]
    pub preset: Preset,
    /// Output dataset directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// JSON file with optional `model` and `train` sections; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub model_kind: Option<KindArg>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, env = "CITYTFT_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub n_heads: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Comma-separated quantiles; must include 0.5.
    #[arg(long, value_delimiter = ',')]
    pub quantiles: Option<Vec<f64>>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Weight trigger classes by inverse frequency.
    #[arg(long)]
    pub class_balanced: bool,
    /// Window stride in hours.
    #[arg(long, default_value_t = citytft::dataio::DEFAULT_STRIDE)]
    pub stride: usize,
    /// Continue from `<out>/last.ckpt`.
    #[arg(long)]
    pub resume: bool,
    /// Output directory for checkpoints, log and manifest.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Checkpoint files; repeat the flag or pass several paths.
    #[arg(long = "checkpoint", num_args = 1.., required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value_t = citytft::eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    #[arg(long, default_value_t = citytft::dataio::DEFAULT_STRIDE)]
    pub stride: usize,
    /// Output directory for report.json and report.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub weather: PathBuf,
    #[arg(long)]
    pub building: PathBuf,
    /// Only predict this building.
    #[arg(long)]
    pub building_id: Option<String>,
    #[arg(long, default_value_t = citytft::eval::DEFAULT_THRESHOLD)]
    pub threshold: f64,
    /// Output CSV path.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Argument(_) | Error::Incompatible(_) | Error::Manifest(_)) => 2,
        Some(
            Error::Io { .. }
            | Error::Integrity(_)
            | Error::Version { .. }
            | Error::Schema(_)
            | Error::Parse { .. }
            | Error::Range { .. }
            | Error::Length { .. }
            | Error::Duplicate { .. }
            | Error::Invariant(_)
            | Error::UnknownVariable(_)
            | Error::Json(_),
        ) => 3,
        Some(Error::Divergence { .. }) => 4,
        Some(Error::StatsMismatch(_)) => 5,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet { "error" } else { "info" }))
        .format_timestamp(None)
        .init();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
