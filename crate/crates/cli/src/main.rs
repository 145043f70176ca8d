//! `cpicl`: pre-train LSA models, run conformal-prediction experiments and
//! fit compute scaling laws.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 FLOP budget
//! error, 4 numerical failure.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] cpicl::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use cpicl::Error as E;
        match self {
            CliError::Usage(_) | CliError::Io(_) => 2,
            CliError::Core(e) => match e {
                E::Budget(_) => 3,
                E::RankDeficient(_) | E::Degenerate(_) | E::FitFailure(_) => 4,
                _ => 2,
            },
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "cpicl", version, about = "Conformal prediction with in-context learning")]
pub struct Cli {
    /// JSON config with optional sections gen, train, experiment, scaling.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true, env = "CPICL_SEED")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "CPICL_OUT", default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for parallel runs (default: all cores).
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Model checkpoint; written by `train`, read by ICL evaluations.
    #[arg(long, global = true)]
    pub checkpoint: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train an LSA model and write a checkpoint.
    Train,
    /// Run an evaluation harness.
    Eval {
        #[command(subcommand)]
        which: EvalCommand,
    },
    /// Scaling-law data collection, fitting and allocation.
    Scaling {
        #[command(subcommand)]
        which: ScalingCommand,
    },
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum EvalCommand {
    /// Coverage and interval width per context size.
    Coverage,
    /// Wasserstein distance between ICL and ridge predictive distributions.
    Wdist,
    /// Inference-time shifts of the input range and weight scale.
    Ood,
    /// Wall-clock time per method and context size.
    Bench,
    /// Typicalness curves of both predictors for one test input.
    Point,
}

#[derive(Debug, Clone, Copy, Subcommand)]
pub enum ScalingCommand {
    /// Train and evaluate models across budgets and depths.
    Sweep,
    /// Fit the scaling law to a datapoint CSV.
    Fit,
    /// Compute-optimal model size and data for each budget.
    Allocate,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
