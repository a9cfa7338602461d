//! Run configuration: one strict JSON document covering the model, the
//! schedule, the toy data distribution, and both training loops.
//!
//! Unknown keys are rejected everywhere — a typo in a hyperparameter
//! name must fail loudly before any compute starts. Every section is
//! optional and falls back to its documented default.
//!
//! ```json
//! {
//!   "unet":     { "image_size": 24, "base_channels": 32, ... },
//!   "schedule": { "steps": 1000, "beta_start": 8.5e-4, ... },
//!   "toy":      { "image_size": 24, "position_jitter": 0.08, ... },
//!   "dataset":  { "size": 12000, "seed": 0 },
//!   "teacher":  { "iterations": 3000, "batch": 8, ... },
//!   "distill":  { "k": 4, "kl_weight": 0.1, ... }
//! }
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tiue_core::data::ToySpec;
use tiue_core::distill::{DistillConfig, TeacherConfig};
use tiue_core::schedule::{NoiseSchedule, ScheduleParams};
use tiue_core::unet::UNetConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub size: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { size: 12_000, seed: 0 }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub unet: UNetConfig,
    pub schedule: ScheduleParams,
    pub toy: ToySpec,
    pub dataset: DatasetConfig,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
}

/// Configuration or schema failure; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "config error: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| ConfigError(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Mirrors every downstream module's preconditions so bad values
    /// fail here, before compute.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.unet.validate().map_err(|e| ConfigError(e.to_string()))?;
        NoiseSchedule::build(self.schedule.clone())
            .map_err(|e| ConfigError(e.to_string()))?;
        self.toy.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.distill.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.dataset.size == 0 {
            return Err(ConfigError("dataset.size must be positive".into()));
        }
        if self.teacher.batch == 0 {
            return Err(ConfigError("teacher.batch must be positive".into()));
        }
        if self.toy.image_size != self.unet.image_size {
            return Err(ConfigError(format!(
                "toy.image_size {} must match unet.image_size {}",
                self.toy.image_size, self.unet.image_size
            )));
        }
        if self.distill.k > self.schedule.steps {
            return Err(ConfigError(format!(
                "distill.k {} exceeds schedule.steps {}",
                self.distill.k, self.schedule.steps
            )));
        }
        if tiue_core::data::COND_DIM != self.unet.cond_dim {
            return Err(ConfigError(format!(
                "unet.cond_dim must be {} to match the condition embedding table",
                tiue_core::data::COND_DIM
            )));
        }
        Ok(())
    }
}
