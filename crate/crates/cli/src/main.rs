//! Command-line pipeline: featurize -> train-base -> finetune -> evaluate ->
//! report, driven by a TOML config and a single run seed. Every command is a
//! pure function of (config, input files, seed); reruns write byte-identical
//! artifacts.
//!
//! Exit codes: 0 success, 1 empty or degenerate input, 2 usage or I/O error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

/// Command failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub message: String,
    pub code: u8,
}

impl CliError {
    /// Usage or I/O problem: exit 2.
    pub fn usage(message: impl Into<String>) -> Self {
        Self { message: message.into(), code: 2 }
    }

    /// Empty or degenerate input: exit 1.
    pub fn degenerate(message: impl Into<String>) -> Self {
        Self { message: message.into(), code: 1 }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.message)
    }
}

#[derive(Parser)]
#[command(
    name = "ucnn",
    version,
    about = "Layer-wise trained CNN for daily market direction prediction with transfer to new markets"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the run seed from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Override the output directory from the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetuneMode {
    Partial,
    Complete,
}

#[derive(Subcommand)]
enum Command {
    /// Compute feature matrices and windowed sample files for every instrument.
    Featurize,
    /// Layer-wise train the base predictor over the pooled instruments.
    TrainBase {
        /// Train a single conventionally-initialized subCNN of this depth
        /// instead of the full growth schedule (debug mode).
        #[arg(long, value_name = "DEPTH")]
        depth_only: Option<usize>,
    },
    /// Fine-tune a base predictor for new instruments.
    Finetune {
        /// Base predictor model file.
        #[arg(long, value_name = "FILE")]
        base: PathBuf,
        /// Instrument name, or "all" for every configured new instrument.
        #[arg(long, default_value = "all")]
        instrument: String,
        #[arg(long, value_enum)]
        mode: FinetuneMode,
    },
    /// Write per-date probabilities of a model over an instrument's test split.
    Predict {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long)]
        instrument: String,
    },
    /// Score a model on an instrument's test split and write the report row.
    Evaluate {
        #[arg(long, value_name = "FILE")]
        model: PathBuf,
        #[arg(long)]
        instrument: String,
        /// Report tag; defaults to the model's provenance tag.
        #[arg(long)]
        tag: Option<String>,
    },
    /// Aggregate report rows into summary tables and the best-count tally.
    Report,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            eprintln!("error: --config is required");
            return ExitCode::from(2);
        }
    };
    let run = config::load_config(&config_path, cli.seed, cli.out.clone()).and_then(|cfg| {
        match &cli.command {
            Command::Featurize => commands::featurize(&cfg),
            Command::TrainBase { depth_only } => commands::train_base(&cfg, *depth_only),
            Command::Finetune { base, instrument, mode } => {
                commands::finetune(&cfg, base, instrument, *mode)
            }
            Command::Predict { model, instrument } => commands::predict(&cfg, model, instrument),
            Command::Evaluate { model, instrument, tag } => {
                commands::evaluate(&cfg, model, instrument, tag.as_deref())
            }
            Command::Report => commands::report(&cfg),
        }
    });
    match run {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
