//! `spicer`: simulate datasets, train, reconstruct, run baselines, evaluate
//! and report.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 I/O or file
//! format error, 4 numeric failure.

mod commands;
mod config;
mod png;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spicer_core::{Error, Precision};

use crate::config::{ExperimentConfig, Settings};

#[derive(Parser)]
#[command(name = "spicer", version, about = "Self-supervised parallel MRI with jointly learned coil maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Debug)]
struct Common {
    /// Flat `key = value` settings file; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random draw of the command.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// On-disk precision of written complex arrays: f32 or f64.
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[command(flatten)]
    settings: Settings,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Subcommand)]
enum Command {
    /// Write train.spcr and test.spcr datasets of paired acquisitions.
    Simulate(Common),
    /// Train on the training split; writes model.spck, loss.json and loss.png.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from this checkpoint up to the configured epoch count.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Reference-free pairs for checkpoint selection. model.spck then
        /// holds the epoch with the lowest loss on them, and model_last.spck
        /// the final state.
        #[arg(long, conflicts_with = "resume")]
        val_data: Option<PathBuf>,
    },
    /// Reconstruct dataset samples with a trained model.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// Dataset to reconstruct (default: the test split).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Only this sample.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Classical reconstructions and their metrics.
    Baseline {
        #[command(flatten)]
        common: Common,
        /// Comma-separated list of zero_filled, tv, grappa.
        #[arg(long, value_delimiter = ',', required = true)]
        method: Vec<commands::BaselineMethod>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Metrics table over the test split for every available method.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Restrict to these methods (default: all that apply).
        #[arg(long, value_delimiter = ',')]
        method: Vec<commands::EvalMethod>,
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Collect loss and metrics summaries from run directories.
    Report {
        #[command(flatten)]
        common: Common,
        /// Comma-separated run directories.
        #[arg(long, value_delimiter = ',', required = true)]
        runs: Vec<PathBuf>,
    },
}

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self { code: 3, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Io { .. } | Error::Version { .. } | Error::Checksum(_) | Error::Format(_) => 3,
            Error::NonFinite(_) | Error::ZeroCalibration | Error::RssUnderflow { .. } | Error::StaleTape => 4,
            Error::Shape(_) | Error::InvalidArgument(_) | Error::MissingAcs | Error::InsufficientAcs { .. } => 2,
        };
        Self { code, message: e.to_string() }
    }
}

fn resolve(common: Common) -> Result<ExperimentConfig, CliError> {
    let file = match &common.config {
        Some(path) => Settings::from_file(path)?,
        None => Settings::default(),
    };
    ExperimentConfig::resolve(common.settings.over(file), common.seed, common.out, common.precision)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(common) => commands::simulate(&resolve(common)?),
        Command::Train { common, resume, val_data } => commands::train(&resolve(common)?, resume.as_deref(), val_data.as_deref()),
        Command::Reconstruct { common, input, index } => commands::reconstruct(&resolve(common)?, input, index),
        Command::Baseline { common, method, input } => commands::baseline(&resolve(common)?, &method, input),
        Command::Eval { common, method, input } => commands::eval(&resolve(common)?, &method, input),
        Command::Report { common, runs } => commands::report(&resolve(common)?, &runs),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
