//! `stms`: generate data, train, evaluate, benchmark and verify the
//! spatio-temporal forecaster.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stms_core::Error;

use crate::config::CommonArgs;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0} verification check(s) failed")]
    Verification(usize),
}

impl CliError {
    /// 1 for bad input or configuration, 2 for runtime failures, 3 when a
    /// verification check fails.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Core(e) => match e {
                Error::Config(_)
                | Error::InvalidArgument(_)
                | Error::Parse { .. }
                | Error::ZeroStd(_)
                | Error::UndefinedMetric(_) => 1,
                _ => 2,
            },
            CliError::Io(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "stms", version, about = "Spatio-temporal traffic forecasting with attention and selective scans")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset (CSV plus metadata sidecar).
    Synth {
        #[arg(long, default_value_t = 4)]
        nodes: usize,
        #[arg(long, default_value_t = 14)]
        days: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints, epochs.csv, metrics.csv and config.txt.
    Train {
        #[command(flatten)]
        common: CommonArgs,
        /// Continue from <out>/state.ckpt.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on the test split; writes per-step metrics.csv.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// FLOPS and inference timing for a checkpoint, or an ablation over a layer grid.
    Bench {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, conflicts_with = "grid")]
        checkpoint: Option<PathBuf>,
        /// Comma-separated `<attention>x<mamba>` layer counts, e.g. `1x1,1x0,0x1`.
        #[arg(long)]
        grid: Option<String>,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Run the least-squares and scan duality checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("STMS_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("STMS_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Validation(format!("cannot size thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    match cli.command {
        Command::Synth { nodes, days, seed, out } => commands::synth(nodes, days, seed, &out),
        Command::Train { common, resume } => commands::train(&common, resume),
        Command::Eval { common, checkpoint } => commands::eval(&common, &checkpoint),
        Command::Bench {
            common,
            checkpoint,
            grid,
            repeats,
        } => commands::bench(&common, checkpoint.as_deref(), grid.as_deref(), repeats),
        Command::Verify { seed, instances, out } => commands::verify(seed, instances, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
