//! TOML run configuration shared by every subcommand.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::arfusion::FusionConfig;
use crate::error::{Error, Result};
use crate::lm::{LmConfig, PretrainConfig};
use crate::synthdata::GeneratorConfig;
use crate::trainer::{CorrectionConfig, EncodersConfig, MmgerConfig, TrainerConfig};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct LmSection {
    pub model: LmConfig,
    pub pretrain: PretrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub lm_path: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            data_dir: "artifacts/data".into(),
            lm_path: "artifacts/lm/frozen_lm.safetensors".into(),
            run_dir: "artifacts/run".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synthdata: GeneratorConfig,
    pub encoders: EncodersConfig,
    pub arfusion: FusionConfig,
    pub correction: CorrectionConfig,
    pub lm: LmSection,
    pub trainer: TrainerConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.synthdata.validate()?;
        self.model().validate()?;
        if self.encoders.shared.input_dim != self.synthdata.feature_dim {
            return Err(Error::Config(format!(
                "encoder input dim {} does not match feature dim {}",
                self.encoders.shared.input_dim, self.synthdata.feature_dim
            )));
        }
        let lm = &self.lm.model;
        if lm.num_heads == 0
            || !lm.dim.is_multiple_of(lm.num_heads)
            || !(lm.dim / lm.num_heads).is_multiple_of(2)
        {
            return Err(Error::Config(
                "LM width must split into even-sized heads".into(),
            ));
        }
        Ok(())
    }

    pub fn model(&self) -> MmgerConfig {
        MmgerConfig {
            encoders: self.encoders.clone(),
            arfusion: self.arfusion.clone(),
            correction: self.correction.clone(),
            trainer: self.trainer.clone(),
        }
    }

    /// Replaces every run seed (data, pretraining, training); the grammar is kept.
    pub fn override_seed(&mut self, seed: u64) {
        self.synthdata.seed = seed;
        self.lm.pretrain.seed = seed;
        self.trainer.seed = seed;
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Writes the resolved configuration into `dir`.
    pub fn echo_into(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))
    }
}
