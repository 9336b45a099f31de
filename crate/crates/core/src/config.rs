//! Run configuration: every knob of a pipeline run in one TOML document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::EnvConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::meta::{FilterConfig, MetaTrainConfig, TaskGrids};
use crate::rl::{BaselineConfig, ExpertConfig, PpoConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Demonstrations rolled out per expert.
    pub trajectories_per_task: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            trajectories_per_task: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub env: EnvConfig,
    pub ppo: PpoConfig,
    pub expert: ExpertConfig,
    pub dataset: DatasetConfig,
    pub meta: MetaTrainConfig,
    pub grids: TaskGrids,
    pub filter: FilterConfig,
    pub eval: EvalConfig,
    pub baseline: BaselineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            env: EnvConfig::default(),
            ppo: PpoConfig::default(),
            expert: ExpertConfig::default(),
            dataset: DatasetConfig::default(),
            meta: MetaTrainConfig::default(),
            grids: TaskGrids::default(),
            filter: FilterConfig::default(),
            eval: EvalConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

/// Named starting points for a configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Profile {
    /// Budgets sized for a single workstation.
    Desk,
    /// The published training budgets and network sizes.
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" | "paper-scale" => Ok(Profile::Paper),
            _ => Err(Error::Config(format!("unknown profile {s:?} (expected desk or paper)"))),
        }
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let mut cfg = RunConfig::default();
        if profile == Profile::Paper {
            cfg.ppo.total_timesteps = 12_000_000;
            cfg.ppo.epochs_per_batch = 30;
            cfg.meta.learning_rate = 3e-6;
            cfg.meta.epochs = 150_000;
            cfg.baseline.hidden_layers = vec![256; 11];
            cfg.baseline.seeds = (0..6).collect();
        }
        cfg
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.ppo.validate()?;
        self.meta.validate()?;
        self.grids.validate()?;
        self.filter.validate()?;
        self.eval.validate()?;
        if self.dataset.trajectories_per_task == 0 {
            return Err(Error::Config("dataset: trajectories_per_task must be positive".into()));
        }
        if self.baseline.seeds.is_empty() || !(self.baseline.budget_fraction > 0.0) {
            return Err(Error::Config("baseline: need seeds and a positive budget fraction".into()));
        }
        if self.meta.presets.is_empty() {
            return Err(Error::Config("meta: at least one preset required".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical TOML rendering, output location excluded.
    pub fn hash(&self) -> Result<String> {
        let mut canonical = self.clone();
        canonical.output_dir = PathBuf::new();
        Ok(hex::encode(Sha256::digest(canonical.to_toml()?.as_bytes())))
    }

    /// Short identifier of the run directory.
    pub fn run_id(&self) -> Result<String> {
        Ok(self.hash()?[..12].to_string())
    }
}
