use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use dmamba::detector::PotConfig;
use dmamba::model::ModelConfig;
use dmamba::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSpec;

/// Everything a run needs, as one JSON document. Missing sections take their
/// defaults; unknown keys are rejected. The HP settings (`lambda`,
/// `history_windows`) live in `model`, the seed in `train.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pot: PotConfig,
    pub data: DatasetSpec,
    /// Directory receiving every output file.
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pot: PotConfig::default(),
            data: DatasetSpec::default(),
            out: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("invalid config {}", path.display()))
    }
}

/// Command-line settings; each one given wins over the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Training CSV.
    #[arg(long, global = true)]
    pub train: Option<PathBuf>,
    /// Test CSV.
    #[arg(long, global = true)]
    pub test: Option<PathBuf>,
    /// Label CSV aligned with the test rows.
    #[arg(long, global = true)]
    pub labels: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// POT risk: target probability that a normal score exceeds the threshold.
    #[arg(long = "risk-q", global = true)]
    pub risk_q: Option<f64>,
    /// HP smoothing parameter.
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub window: Option<usize>,
    /// Training window stride.
    #[arg(long, global = true)]
    pub stride: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
}

impl Overrides {
    /// Config file (or defaults) with the given flags applied.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(p) = &self.train {
            cfg.data.train_path = Some(p.clone());
        }
        if let Some(p) = &self.test {
            cfg.data.test_path = Some(p.clone());
        }
        if let Some(p) = &self.labels {
            cfg.data.label_path = Some(p.clone());
        }
        if let Some(p) = &self.out {
            cfg.out = p.clone();
        }
        if let Some(v) = self.seed {
            cfg.train.seed = v;
        }
        if let Some(v) = self.risk_q {
            cfg.pot.risk = v;
        }
        if let Some(v) = self.lambda {
            cfg.model.lambda = v;
        }
        if let Some(v) = self.window {
            cfg.model.window = v;
        }
        if let Some(v) = self.stride {
            cfg.train.stride = v;
        }
        if let Some(v) = self.epochs {
            cfg.train.epochs = v;
        }
        Ok(cfg)
    }
}
