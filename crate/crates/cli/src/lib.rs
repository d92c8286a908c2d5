pub mod commands;
pub mod config;
pub mod rundir;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use multits_core::data::{DataError, MissingScheme};
use multits_core::model::ModelError;
use multits_core::pipeline::PipelineError;
use thiserror::Error;

pub use config::RunConfig;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config key `{key}`: {msg}")]
    Config { key: String, msg: String },
    #[error("input {path}: {msg}")]
    Input { path: PathBuf, msg: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("gradient check failed: worst relative error {0:e}")]
    GradcheckFailed(f64),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

impl CliError {
    /// 1 for invalid configs, flags, inputs or failed checks; 2 for failures
    /// while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config { .. } | Self::Input { .. } | Self::GradcheckFailed(_) => 1,
            Self::Pipeline(p) => match p {
                PipelineError::Invalid(_) | PipelineError::UnknownVariant(_) => 1,
                PipelineError::Model(ModelError::Config(_)) => 1,
                PipelineError::Data(d) => match d {
                    DataError::Io { .. }
                    | DataError::Parse { .. }
                    | DataError::Dimension(_)
                    | DataError::SeriesTooShort { .. }
                    | DataError::EmptySplit(_)
                    | DataError::BadRatios(_)
                    | DataError::RateOutOfRange(_)
                    | DataError::IndexOutOfRange { .. }
                    | DataError::NegativeWeight(_) => 1,
                    _ => 2,
                },
                _ => 2,
            },
            Self::Io { .. } | Self::Csv(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "multits", version, about = "Multivariate time-series forecasting with prompts, graphs and trend text")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Ensemble size: runs with seeds seed, seed+1, ...
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model bundle (evaluate, forecast) or tuned LM adapters (train, ablate,
    /// simulate-missing).
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated ablation variants.
    #[arg(long, global = true, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    /// Comma-separated missing rates.
    #[arg(long, global = true, value_delimiter = ',')]
    pub rates: Option<Vec<f64>>,
    #[arg(long, global = true)]
    pub scheme: Option<SchemeArg>,
    /// Series file to forecast from (defaults to the configured data).
    #[arg(long, global = true)]
    pub input: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum SchemeArg {
    Mcar,
    Block,
}

impl From<SchemeArg> for MissingScheme {
    fn from(s: SchemeArg) -> Self {
        match s {
            SchemeArg::Mcar => MissingScheme::Mcar,
            SchemeArg::Block => MissingScheme::Block,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Window, split and normalize the data; optionally apply a missing mask.
    Prepare,
    /// Train the forecaster.
    Train,
    /// Instruction-tune the trend LM and cache its text states.
    TrainLm,
    /// Score a saved model bundle on the validation and test splits.
    Evaluate,
    /// Write predictions for every window of an input series.
    Forecast,
    /// Train on data with simulated missing values at several rates.
    SimulateMissing,
    /// Train single-component ablations next to the full model.
    Ablate,
    /// Check analytic gradients against central differences.
    Gradcheck,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Self::Prepare => "prepare",
            Self::Train => "train",
            Self::TrainLm => "train-lm",
            Self::Evaluate => "evaluate",
            Self::Forecast => "forecast",
            Self::SimulateMissing => "simulate-missing",
            Self::Ablate => "ablate",
            Self::Gradcheck => "gradcheck",
        }
    }
}

/// Caps rayon workers from `MULTITS_THREADS`.
fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("MULTITS_THREADS") else {
        return Ok(());
    };
    let k: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&k| k >= 1)
        .ok_or_else(|| CliError::Usage(format!("MULTITS_THREADS must be a positive integer, got {raw:?}")))?;
    // a pool built earlier in the same process keeps its size
    let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
    Ok(())
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    match init_threads().and_then(|()| commands::run(&cli)) {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
