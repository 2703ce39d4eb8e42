//! Command-line driver for two-moon experiments on step-scaled residual
//! networks. Every subcommand reads an optional `key = value` configuration
//! file, applies command-line overrides, and writes its outputs into a run
//! directory named by the configuration content hash under `--out`. Exit
//! code 0 means the experiment ran (training divergence is a recorded
//! outcome, not a failure), 2 means a usage or configuration error, and 3
//! means an internal invariant violation.

mod commands;
mod config;
mod runner;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{ExperimentConfig, Kind};

/// Usage problems exit with 2, internal failures with 3.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Internal(euler_resnet::Error),
}

impl From<euler_resnet::Error> for CliError {
    fn from(e: euler_resnet::Error) -> CliError {
        CliError::Internal(e)
    }
}

#[derive(Parser)]
#[command(
    name = "euler-resnet",
    version,
    about = "Two-moon experiments for residual networks with an explicit step factor"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the scalar decay benchmark with explicit fixed steps
    Euler(RunArgs),
    /// Train one classifier and record per-epoch metrics
    Train(RunArgs),
    /// Sweep the step factor over seeds and aggregate final accuracies
    Gridsearch(RunArgs),
    /// Cross injected training noise with step factors and seeds
    NoiseSweep(RunArgs),
    /// Emit gradient, perturbation, bound, and trajectory diagnostics
    Diagnose(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file; built-in defaults are used when omitted
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory that receives the run directory
    #[arg(long, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
    /// Override the network and training seeds
    #[arg(long)]
    seed: Option<u64>,
    /// Override the step factor h (for euler, the whole step list)
    #[arg(long)]
    h: Option<f64>,
    /// Override the residual trunk depth
    #[arg(long)]
    depth: Option<usize>,
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(dir) => {
            println!("run directory: {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(CliError::Usage(message)) => {
            eprintln!("error: {message}");
            ExitCode::from(2)
        }
        Err(CliError::Internal(e)) => {
            eprintln!("internal error: {e}");
            ExitCode::from(3)
        }
    }
}

fn run(cli: Cli) -> Result<PathBuf, CliError> {
    let (kind, args) = match &cli.command {
        Command::Euler(a) => (Kind::Euler, a),
        Command::Train(a) => (Kind::Train, a),
        Command::Gridsearch(a) => (Kind::Gridsearch, a),
        Command::NoiseSweep(a) => (Kind::NoiseSweep, a),
        Command::Diagnose(a) => (Kind::Diagnose, a),
    };
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))?;
            config::parse_for(&text, kind).map_err(CliError::Usage)?
        }
        None => ExperimentConfig::default_for(kind),
    };
    if let Some(seed) = args.seed {
        cfg.network.seed = seed;
        cfg.train.seed = seed;
    }
    if let Some(h) = args.h {
        cfg.network.h = h;
        if kind == Kind::Euler {
            cfg.euler.h_values = vec![h];
        }
    }
    if let Some(depth) = args.depth {
        cfg.network.depth = depth;
    }
    cfg.validate_for_kind().map_err(CliError::Usage)?;
    match kind {
        Kind::Euler => commands::euler(&cfg, &args.out),
        Kind::Train => commands::train_once(&cfg, &args.out),
        Kind::Gridsearch => commands::gridsearch(&cfg, &args.out),
        Kind::NoiseSweep => commands::noise_sweep(&cfg, &args.out),
        Kind::Diagnose => commands::diagnose(&cfg, &args.out),
    }
}
