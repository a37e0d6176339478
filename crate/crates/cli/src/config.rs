//! TOML run configuration: data locations, split geometry, architecture
//! overrides and training hyperparameters. Command-line flags override file
//! values.

use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use serde::Deserialize;

use ucnn_core::dataio::SplitSpec;
use ucnn_core::model::ArchitectureConfig;
use ucnn_core::optim::{OptimizerConfig, OptimizerKind};
use ucnn_core::training::TrainConfig;

use crate::CliError;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub version: u32,
    pub seed: Option<u64>,
    pub seeds: Option<Vec<u64>>,
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub split: SplitSection,
    #[serde(default)]
    pub architecture: ArchSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub instrument_dir: PathBuf,
    pub aux_dir: PathBuf,
    /// Instruments pooled to train the base predictor.
    pub pool: Vec<String>,
    /// Unseen instruments targeted by fine-tuning.
    #[serde(default)]
    pub new: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub train_end: String,
    pub val_fraction: f64,
    pub test_start: String,
    pub test_end: String,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchSection {
    pub window: Option<usize>,
    pub dropout: Option<f64>,
    pub use_bias: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub max_epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub optimizer: Option<String>,
    pub learning_rate: Option<f64>,
}

/// Validated, merged configuration a command runs under.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub instrument_dir: PathBuf,
    pub aux_dir: PathBuf,
    pub pool: Vec<String>,
    pub new: Vec<String>,
    pub split: SplitSpec,
    pub arch: ArchitectureConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
}

impl RunConfig {
    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    pub fn features_dir(&self) -> PathBuf {
        self.out_dir.join("features")
    }

    pub fn models_dir(&self) -> PathBuf {
        self.out_dir.join("models")
    }

    pub fn reports_dir(&self) -> PathBuf {
        self.out_dir.join("reports")
    }

    pub fn predictions_dir(&self) -> PathBuf {
        self.out_dir.join("predictions")
    }

    pub fn instrument_csv(&self, instrument: &str) -> PathBuf {
        self.instrument_dir.join(format!("{instrument}.csv"))
    }

    pub fn samples_bin(&self, instrument: &str) -> PathBuf {
        self.features_dir().join(format!("{instrument}.samples.bin"))
    }
}

fn parse_date(field: &str, s: &str) -> Result<NaiveDate, CliError> {
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map_err(|e| CliError::usage(format!("config split.{field}: bad date '{s}': {e}")))
}

/// Loads, validates and merges the config with flag overrides.
pub fn load_config(
    path: &Path,
    seed_flag: Option<u64>,
    out_flag: Option<PathBuf>,
) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
    let file: RunConfigFile = toml::from_str(&text)
        .map_err(|e| CliError::usage(format!("config {}: {e}", path.display())))?;

    if file.version != CONFIG_VERSION {
        return Err(CliError::usage(format!(
            "config version {} unsupported (expected {CONFIG_VERSION})",
            file.version
        )));
    }

    let mut seeds: Vec<u64> = match (&file.seeds, file.seed) {
        (Some(list), _) if !list.is_empty() => list.clone(),
        (_, Some(s)) => vec![s],
        _ => {
            return Err(CliError::usage(
                "config must set `seed` or a non-empty `seeds` list".to_string(),
            ))
        }
    };
    if let Some(s) = seed_flag {
        seeds = vec![s];
    }

    let split = SplitSpec {
        train_end: parse_date("train_end", &file.split.train_end)?,
        val_fraction: file.split.val_fraction,
        test_start: parse_date("test_start", &file.split.test_start)?,
        test_end: parse_date("test_end", &file.split.test_end)?,
    };
    split
        .validate()
        .map_err(|e| CliError::usage(format!("config split: {e}")))?;

    let mut arch = ArchitectureConfig::default();
    if let Some(w) = file.architecture.window {
        arch.window = w;
    }
    if let Some(d) = file.architecture.dropout {
        arch.dropout_rate = d;
    }
    if let Some(b) = file.architecture.use_bias {
        arch.use_bias = b;
    }
    arch.validate()
        .map_err(|e| CliError::usage(format!("config architecture: {e}")))?;

    let defaults = TrainConfig::default();
    let kind = match file.train.optimizer.as_deref() {
        None | Some("adam") => OptimizerKind::Adam,
        Some("sgd") => OptimizerKind::Sgd,
        Some(other) => {
            return Err(CliError::usage(format!(
                "config train.optimizer: unknown optimizer '{other}' (adam|sgd)"
            )))
        }
    };
    let train = TrainConfig {
        max_epochs: file.train.max_epochs.unwrap_or(defaults.max_epochs),
        batch_size: file.train.batch_size.unwrap_or(defaults.batch_size),
        patience: file.train.patience.unwrap_or(defaults.patience),
        optimizer: OptimizerConfig {
            kind,
            learning_rate: file
                .train
                .learning_rate
                .unwrap_or(defaults.optimizer.learning_rate),
            ..OptimizerConfig::default()
        },
        seed: seeds[0],
        dropout_rate: arch.dropout_rate,
    };

    for dir in [&file.data.instrument_dir, &file.data.aux_dir] {
        if !dir.is_dir() {
            return Err(CliError::usage(format!(
                "config data: directory {} does not exist",
                dir.display()
            )));
        }
    }
    if file.data.pool.is_empty() {
        return Err(CliError::usage("config data.pool must be non-empty".to_string()));
    }
    for inst in file.data.pool.iter().chain(&file.data.new) {
        let p = file.data.instrument_dir.join(format!("{inst}.csv"));
        if !p.is_file() {
            return Err(CliError::usage(format!(
                "config data: instrument file {} does not exist",
                p.display()
            )));
        }
    }

    Ok(RunConfig {
        out_dir: out_flag.unwrap_or(file.out_dir),
        instrument_dir: file.data.instrument_dir,
        aux_dir: file.data.aux_dir,
        pool: file.data.pool,
        new: file.data.new,
        split,
        arch,
        train,
        seeds,
    })
}
