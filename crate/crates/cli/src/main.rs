//! `ddpol`: batch front end for channel synthesis, estimation and sweeps.
//!
//! Exit status: 0 on success, 1 on a runtime failure, 2 on a malformed
//! configuration or command line, 3 when the requested path count is beyond a
//! hard identifiability bound.

mod commands;
mod config;
mod selftest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable capping the worker threads used by sweeps.
const THREADS_VAR: &str = "DDPOL_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// `field` is empty when the message itself names the fields involved.
    #[error("invalid config{}: {message}", field_label(.field))]
    Config { field: String, message: String },

    #[error("{0}")]
    Infeasible(ddpol_core::Error),

    #[error("{0}")]
    Run(ddpol_core::Error),

    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },

    #[error("selftest failed: {0}")]
    SelfTest(String),
}

fn field_label(field: &str) -> String {
    if field.is_empty() {
        String::new()
    } else {
        format!(" field `{field}`")
    }
}

impl CliError {
    pub fn config(field: &str, err: impl std::fmt::Display) -> Self {
        CliError::Config { field: field.to_string(), message: err.to_string() }
    }

    /// Classifies a library error raised while checking configuration `field`.
    pub fn from_core(field: &str, err: ddpol_core::Error) -> Self {
        match err {
            ddpol_core::Error::Infeasible { .. } => CliError::Infeasible(err),
            ddpol_core::Error::Domain(message) => CliError::Config { field: field.to_string(), message },
            other => CliError::Run(other),
        }
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config { .. } => 2,
            CliError::Infeasible(_) => 3,
            CliError::Run(_) | CliError::Io { .. } | CliError::SelfTest(_) => 1,
        }
    }
}

impl From<ddpol_core::Error> for CliError {
    fn from(e: ddpol_core::Error) -> Self {
        match e {
            ddpol_core::Error::Infeasible { .. } => CliError::Infeasible(e),
            other => CliError::Run(other),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ddpol", version, about = "Dual-polarized MIMO channel parameter estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Largest identifiable path counts for an array configuration.
    Bounds(BoundsArgs),
    /// Draw one channel realization and write it with its ground truth.
    Synth(SynthArgs),
    /// Estimate one realization with the orthogonal-pilot tensor method.
    EstimateParafac(EstimateArgs),
    /// Estimate one realization with the compressed-pilot method.
    EstimateCtd(EstimateArgs),
    /// Run a Monte-Carlo sweep and write CSV summaries.
    Sweep(SweepArgs),
    /// Noiseless round trips and the gradient check.
    Selftest,
}

#[derive(Debug, Args)]
pub struct BoundsArgs {
    #[arg(long)]
    pub mr: usize,
    #[arg(long)]
    pub mx: usize,
    #[arg(long)]
    pub my: usize,
    /// Training length; adds the compressed-pilot bound.
    #[arg(long)]
    pub n: Option<usize>,
    /// Print JSON instead of text.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Channel matrix CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Ground-truth JSON; defaults to the channel path with `.truth.json`.
    #[arg(long)]
    pub truth: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EstimateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `scenario.snr_db`.
    #[arg(long)]
    pub snr: Option<f64>,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Summary CSV; defaults to `output.summary` from the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-trial CSV; defaults to `output.trials` from the config.
    #[arg(long)]
    pub trials_out: Option<PathBuf>,
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::config(THREADS_VAR, format!("expected a positive integer, got {raw:?}")))?;
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::config(THREADS_VAR, e))?;
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Bounds(a) => commands::bounds(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::EstimateParafac(a) => commands::estimate(&a, commands::Estimator::Parafac),
        Command::EstimateCtd(a) => commands::estimate(&a, commands::Estimator::Ctd),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Selftest => selftest::run(),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
