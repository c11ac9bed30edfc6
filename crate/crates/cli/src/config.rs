//! The JSON run configuration.
//!
//! Every section is optional and falls back to its defaults; unknown keys
//! are rejected at every level. A complete document:
//!
//! ```json
//! {
//!   "dataset": { "synthetic": { "channels": 8, "targets": 2, "length": 1200, "regimes": 4,
//!                               "embedding_dim": 64, "outlook_leak": "oracle", "seed": 0 } },
//!   "model": { "latent": 16, "codebook_size": 16, "generator_hidden": 64 },
//!   "training": { "learning_rate": 0.001, "max_epochs": 40, "batch_size": 32,
//!                 "seeds": [0, 1, 2], "vq_weight": 0.01, "patience": 5, "min_delta": 1e-6 },
//!   "backtest": { "start_week": "2021-W01", "years": 2, "last_points": 6 },
//!   "models": ["vanilla-tsmixer", "air-tsmixer"],
//!   "refinery": { "subject": "crude oil", "description": "crude oil market",
//!                 "targets": [{ "name": "WTI", "description": "West Texas Intermediate crude oil price" }],
//!                 "backend": { "base_url": "https://api.openai.com/v1", "auth_env": "OPENAI_API_KEY" } },
//!   "output": "out",
//!   "workers": 0
//! }
//! ```
//!
//! The real-data alternative replaces the dataset section with
//!
//! ```json
//! { "real": { "daily_csv": "prices.csv", "weekly_csv": "inventories.csv",
//!             "key_driver": "keydriver_emb.jsonl", "outlook": "outlook_emb.jsonl",
//!             "descriptions": "descriptions.jsonl", "targets": ["WTI", "Brent"],
//!             "text_target": "WTI" } }
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};

use air_core::backtest::TrainConfig;
use air_core::data::{IsoWeek, SyntheticSpec};
use air_core::model::{ModelConfig, ModelId};
use air_refinery::PipelineConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Exactly one data source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic(SyntheticSpec),
    Real(RealPaths),
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RealPaths {
    /// Daily series: a `date` column followed by one column per channel.
    pub daily_csv: PathBuf,
    /// Optional weekly series, interpolated onto the daily dates.
    #[serde(default)]
    pub weekly_csv: Option<PathBuf>,
    pub key_driver: PathBuf,
    pub outlook: PathBuf,
    pub descriptions: PathBuf,
    /// Channel names to forecast.
    pub targets: Vec<String>,
    /// Which per-target text stream to read from the embedding files.
    /// Defaults to the first target; untagged records are always used.
    #[serde(default)]
    pub text_target: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    /// First retrain week; defaults to the week of the first data date.
    pub start_week: Option<IsoWeek>,
    /// Span in years; defaults to covering the data.
    pub years: Option<u32>,
    /// Keep only the last `n` retrain points that have origins.
    pub last_points: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub backtest: BacktestConfig,
    pub models: Vec<ModelId>,
    pub refinery: PipelineConfig,
    pub output: PathBuf,
    /// Parallel training runs; 0 means the available cores, at most 8.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            backtest: BacktestConfig::default(),
            models: ["vanilla-tsmixer", "air-tsmixer"]
                .iter()
                .map(|s| s.parse().expect("built-in model id"))
                .collect(),
            refinery: PipelineConfig::default(),
            output: PathBuf::from("out"),
            workers: 0,
        }
    }
}

/// The part of the configuration that determines results. Output location
/// and worker count are left out so they never change report bytes.
#[derive(Serialize)]
pub struct ResultKey<'a> {
    pub dataset: &'a DatasetConfig,
    pub model: &'a ModelConfig,
    pub training: &'a TrainConfig,
    pub backtest: &'a BacktestConfig,
    pub models: &'a [ModelId],
}

impl RunConfig {
    pub fn parse(text: &str, source: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text)
            .map_err(|e| CliError::Config(format!("{source}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config file, resolving relative paths against
    /// its directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let DatasetConfig::Real(r) = &mut cfg.dataset {
            for p in [
                &mut r.daily_csv,
                &mut r.key_driver,
                &mut r.outlook,
                &mut r.descriptions,
            ] {
                *p = base.join(&*p);
            }
            if let Some(w) = &mut r.weekly_csv {
                *w = base.join(&*w);
            }
        }
        Ok(cfg)
    }

    /// Defaults when no file is given.
    pub fn load_or_default(path: Option<&Path>) -> CliResult<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn validate(&self) -> CliResult<()> {
        match &self.dataset {
            DatasetConfig::Synthetic(spec) => spec.validate()?,
            DatasetConfig::Real(r) => {
                if r.targets.is_empty() {
                    return Err(CliError::Config("dataset.real.targets is empty".into()));
                }
            }
        }
        self.training.validate()?;
        if self.backtest.years == Some(0) {
            return Err(CliError::Config("backtest.years must be at least 1".into()));
        }
        if self.backtest.last_points == Some(0) {
            return Err(CliError::Config("backtest.last_points must be at least 1".into()));
        }
        if self.models.is_empty() {
            return Err(CliError::Config("models is empty".into()));
        }
        self.refinery.validate()?;
        Ok(())
    }

    pub fn result_key(&self) -> ResultKey<'_> {
        ResultKey {
            dataset: &self.dataset,
            model: &self.model,
            training: &self.training,
            backtest: &self.backtest,
            models: &self.models,
        }
    }
}

/// Parses `a,b,c` into model ids.
pub fn parse_models(list: &str) -> CliResult<Vec<ModelId>> {
    list.split(',')
        .map(|s| s.trim().parse().map_err(CliError::from))
        .collect()
}
