//! `dapr`: generate data, train prediction/prior pairs and baselines, run
//! sweeps and export prior explanations.

mod commands;
mod config;
mod schema;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Invalid flags or configuration (exit code 2).
    #[error("{0}")]
    Config(String),
    /// Failure while doing the work (exit code 1).
    #[error(transparent)]
    Runtime(#[from] dapr_core::Error),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(dapr_core::Error::InvalidArgument(_)) => 2,
            CliError::Runtime(_) | CliError::Failed(_) => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dapr", version, about = "Attribution-prior training and explanation toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Master seed; overrides any seed in a config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
    /// Progress messages on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[command(subcommand)]
        generator: Generator,
    },
    /// Train one model from a JSON run config.
    Train {
        /// Path of the run config.
        config: PathBuf,
    },
    /// Run an experiment sweep from a JSON spec and write results.csv.
    Sweep {
        /// Path of the experiment spec.
        spec: PathBuf,
    },
    /// Export explanations of a trained prior.
    Explain(ExplainArgs),
}

#[derive(Debug, Subcommand)]
pub enum Generator {
    /// Two interleaved half circles plus standard normal nuisance features.
    TwoMoons {
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        nuisance: usize,
    },
    /// Sparse linear regression whose weights depend on meta-features.
    MetaRegression {
        #[arg(long, default_value_t = 300)]
        n: usize,
        #[arg(long, default_value_t = 500)]
        p: usize,
        #[arg(long, default_value_t = 4)]
        k: usize,
        #[arg(long, default_value_t = 0.1)]
        noise_std: f64,
    },
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    /// Prior checkpoint (JSON).
    #[arg(long)]
    pub prior: PathBuf,
    /// Meta-feature matrix (CSV).
    #[arg(long)]
    pub meta: PathBuf,
    /// features.csv whose header must match the meta-feature rows.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Meta-feature to plot; repeatable. Defaults to every non-constant one.
    #[arg(long)]
    pub pdp: Vec<String>,
    /// Partial dependence grid size.
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(2..))]
    pub grid: u64,
    /// Expected Gradients draws per feature.
    #[arg(long, default_value_t = 200, value_parser = clap::value_parser!(u64).range(1..))]
    pub samples: u64,
    /// Number of features in importance.csv.
    #[arg(long)]
    pub top: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
