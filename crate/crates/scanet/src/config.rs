//! TOML config files covering both the network and the training run, plus
//! the built-in presets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::NetworkConfig;
use crate::error::{Error, Result};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct FileConfig {
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

impl FileConfig {
    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(FileConfig {
                network: NetworkConfig::default(),
                train: TrainConfig::paper(),
            }),
            "desk" => Ok(FileConfig {
                network: NetworkConfig::default(),
                train: TrainConfig::desk(),
            }),
            other => Err(Error::InvalidConfig(format!(
                "unknown preset {other:?} (expected \"paper\" or \"desk\")"
            ))),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: FileConfig = toml::from_str(&text)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        cfg.network.validate()?;
        cfg.train.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }
}
