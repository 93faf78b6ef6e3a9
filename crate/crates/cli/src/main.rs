//! `teal`: generate toy models, calibrate, run the greedy allocator,
//! evaluate sparsity configs, and print theory and kernel tables.

mod commands;
mod output;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use teal_core::TealError;

use output::Format;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),

    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{context}: {source}")]
    Core { context: String, source: TealError },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Attach a path or block name to a library error.
    pub fn core(context: impl Into<String>) -> impl FnOnce(TealError) -> CliError {
        let context = context.into();
        move |source| match source {
            TealError::Io(e) => CliError::Io {
                path: PathBuf::from(context),
                source: e,
            },
            source => CliError::Core { context, source },
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io { .. } => 3,
            CliError::Validation(_) | CliError::Core { .. } => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "teal",
    version,
    about = "Activation sparsity experiments on toy transformer blocks"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a seeded random model file.
    GenModel(GenModelArgs),
    /// Record activation histograms at every tap of every block.
    Calibrate(CalibrateArgs),
    /// Run the greedy allocator per block and emit traces and configs.
    Greedy(GreedyArgs),
    /// Relative error of uniform or greedy configs against the dense model.
    Eval(EvalArgs),
    /// Analytic and Monte Carlo relative error of a pruned random GEMV.
    Theory(TheoryArgs),
    /// Time the column-skipping GEMV against the dense one.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Root seed; each subcommand has its own default.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output file, or directory for calibrate and greedy.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "tsv")]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct DimsArgs {
    #[arg(long, default_value_t = 4)]
    pub blocks: usize,
    #[arg(long, default_value_t = 256)]
    pub d_model: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: usize,
    #[arg(long, default_value_t = 704)]
    pub d_ff: usize,
}

/// Synthetic input sequences fed to the model.
#[derive(Debug, Args)]
pub struct InputArgs {
    /// Number of sequences.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Tokens per sequence.
    #[arg(long, default_value_t = 128)]
    pub seq: usize,
    /// Log-normal spread of per-channel input gains.
    #[arg(long, default_value_t = teal_core::InputDistribution::DEFAULT_SPREAD)]
    pub spread: f64,
    #[arg(long, default_value_t = 77)]
    pub profile_seed: u64,
}

#[derive(Debug, Args)]
pub struct GenModelArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub dims: DimsArgs,
}

#[derive(Debug, Args)]
pub struct CalibrateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long, default_value_t = teal_core::DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct GreedyArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    /// Directory written by `calibrate`.
    #[arg(long)]
    pub hists: PathBuf,
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long, default_value_t = 0.05)]
    pub alpha: f64,
    /// Block sparsities at which configs are emitted.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.4,0.5,0.65")]
    pub targets: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub hists: PathBuf,
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Config file written by `greedy`; replaces the uniform grid.
    #[arg(long, conflicts_with = "uniform")]
    pub config: Option<PathBuf>,
    /// Uniform sparsity levels to evaluate.
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9")]
    pub uniform: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct TheoryArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1"
    )]
    pub ps: Vec<f64>,
    /// Square matrix size for the Monte Carlo runs.
    #[arg(long, default_value_t = 1024)]
    pub dim: usize,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long, default_value_t = 4096)]
    pub rows: usize,
    #[arg(long, default_value_t = 14336)]
    pub cols: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,0.25,0.5,0.75,0.9")]
    pub sparsities: Vec<f64>,
    #[arg(long, default_value_t = 10)]
    pub reps: usize,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenModel(a) => commands::gen_model(&a),
        Command::Calibrate(a) => commands::calibrate(&a),
        Command::Greedy(a) => commands::greedy(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Theory(a) => commands::theory(&a),
        Command::Bench(a) => commands::bench(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
