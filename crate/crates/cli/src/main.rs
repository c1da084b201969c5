//! `ncg`: generate benchmark data, train and evaluate neural coarse-graining
//! models, run parameter sweeps and gradient checks.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime or
//! numerical error.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] ncg_core::NcgError),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 1,
            CliError::Runtime(_) | CliError::Failed(_) => 2,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "ncg", version, about = "Neural coarse-graining experiment runner")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct GlobalArgs {
    /// Experiment configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the training seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Model preset: noise-default or har-ucinet.
    #[arg(long, global = true)]
    pub preset: Option<String>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write train.csv, test.csv, truth.csv and meta.json.
    Generate,
    /// Train a model; writes checkpoint.json, runlog.csv and summary.json.
    Train {
        /// Continue from the checkpoint in the output directory.
        #[arg(long)]
        resume: bool,
        /// Also save the checkpoint every N epochs.
        #[arg(long)]
        checkpoint_every: Option<usize>,
    },
    /// Evaluate a checkpoint: correlation, transitions and plots.
    Eval {
        /// Defaults to checkpoint.json in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate over a grid of values for one parameter.
    Sweep {
        /// cos_theta, theta, tau, n, lr, batch_size, epochs or offset.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        /// Seeds per value (base seed, base + 1, ...).
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Finite-difference check of every differentiable op and of the loss.
    Gradcheck {
        /// Random instances per op.
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, hide = true)]
        inject_conv_sign_bug: bool,
    },
}

/// True when `NCG_DETERMINISTIC=1`: single thread and no wall-clock values
/// in any output.
pub fn deterministic() -> bool {
    std::env::var("NCG_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Generate => commands::generate(&cli.global),
        Command::Train {
            resume,
            checkpoint_every,
        } => commands::train(&cli.global, resume, checkpoint_every),
        Command::Eval { checkpoint } => commands::eval(&cli.global, checkpoint),
        Command::Sweep { param, values, seeds } => commands::sweep(&cli.global, &param, &values, seeds),
        Command::Gradcheck {
            instances,
            inject_conv_sign_bug,
        } => commands::gradcheck(&cli.global, instances, inject_conv_sign_bug),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ncg: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
