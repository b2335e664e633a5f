//! Run configuration as one TOML document.
//!
//! A file only needs the keys it changes: it is merged over a base profile
//! before deserialization, so
//!
//! ```toml
//! [train]
//! lr = 1e-3
//! ```
//!
//! is a complete configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{ControllerGains, DisturbanceConfig, Windowing};
use crate::dynamics::PhysicalParams;
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::seq2seq::ModelConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!("unknown profile {other:?} (desk or paper)"))),
        }
    }
}

/// Synthetic dataset generation and windowing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub logs: usize,
    pub min_rows: usize,
    pub max_rows: usize,
    /// Seeds trajectory parameters, lengths and noise.
    pub seed: u64,
    pub stride: usize,
    /// Train, validation and test shares by window count.
    pub fractions: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            logs: 48,
            min_rows: 197,
            max_rows: 799,
            seed: 0,
            stride: 1,
            fractions: [0.58, 0.17, 0.25],
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub physics: PhysicalParams,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub disturbance: DisturbanceConfig,
    pub gains: ControllerGains,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::profile(Profile::Desk)
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl RunConfig {
    pub fn profile(profile: Profile) -> Self {
        let (model, train) = match profile {
            Profile::Desk => (ModelConfig::desk(), TrainConfig::desk()),
            Profile::Paper => (ModelConfig::paper(), TrainConfig::paper()),
        };
        RunConfig {
            physics: PhysicalParams::default(),
            model,
            loss: LossWeights::default(),
            train,
            disturbance: DisturbanceConfig::default(),
            gains: ControllerGains::default(),
            data: DataConfig::default(),
        }
    }

    /// Small network, short history and a windy dataset: a configuration
    /// whose full baseline matrix trains in minutes on one core.
    pub fn quick() -> Self {
        let base = RunConfig::profile(Profile::Desk);
        RunConfig {
            model: ModelConfig {
                latent_dim: 16,
                hidden_dim: 32,
                num_lstm_layers: 1,
                attention_dim: 16,
                head_dim: 32,
                history: 20,
                horizon: 25,
                ..base.model
            },
            train: TrainConfig {
                lr: 1e-3,
                max_epochs: 60,
                early_stop_patience: 15,
                ..base.train
            },
            disturbance: DisturbanceConfig {
                wind: [3.0, 1.5, 0.0],
                downwash: 0.02,
                ..base.disturbance
            },
            data: DataConfig {
                logs: 24,
                min_rows: 300,
                max_rows: 500,
                seed: 7,
                stride: 4,
                split_seed: 1,
                ..base.data
            },
            ..base
        }
    }

    /// Parse `text` as overrides of `base`.
    pub fn from_toml(text: &str, base: &RunConfig) -> Result<Self> {
        let over: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut table = toml::Table::try_from(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut table, over);
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, base: &RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::from_toml(&text, base).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.physics.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        let d = &self.data;
        if d.stride == 0 || d.min_rows > d.max_rows {
            return Err(Error::Config(format!(
                "data.stride must be >= 1 and data.min_rows <= data.max_rows (got {}, {}..{})",
                d.stride, d.min_rows, d.max_rows
            )));
        }
        Ok(())
    }

    pub fn windowing(&self) -> Windowing {
        Windowing {
            history: self.model.history,
            horizon: self.model.horizon,
            stride: self.data.stride,
        }
    }
}
