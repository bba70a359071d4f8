use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataforge::{Alphabet, DataConfig};
use crate::error::{Error, Result};
use crate::model::LMConfig;
use crate::trainer::{AblationGrid, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzeConfig {
    /// Offsets either side of the first edit.
    pub window: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self { window: 5 }
    }
}

/// Everything one experiment needs, read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub model: LMConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub ablate: AblationGrid,
    pub analyze: AnalyzeConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output_dir: PathBuf::from("out"),
            model: LMConfig::default(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
            ablate: AblationGrid::default(),
            analyze: AnalyzeConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim_end().to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.model.vocab_size < Alphabet::SIZE {
            return Err(Error::Config(format!(
                "model.vocab_size must cover the {}-symbol alphabet, got {}",
                Alphabet::SIZE,
                self.model.vocab_size
            )));
        }
        if self.analyze.window == 0 {
            return Err(Error::Config("analyze.window must be >= 1".into()));
        }
        Ok(())
    }
}
