//! Experiment configuration: one JSON document with a section per module.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::PromptMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::probe::ProbeConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub count_per_class: usize,
    pub image_size: usize,
    pub seed: u64,
    pub train_fraction: f64,
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            count_per_class: 625,
            image_size: 64,
            seed: 0,
            train_fraction: 0.8,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Prompt for trained checkpoints; the sweep baseline always uses the options prompt.
    pub prompt_mode: PromptMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            prompt_mode: PromptMode::Finetune,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let c = &self.corpus;
        if c.count_per_class == 0 {
            return Err(Error::Config("corpus.count_per_class must be positive".into()));
        }
        if !(c.train_fraction > 0.0 && c.train_fraction < 1.0) {
            return Err(Error::Config(format!("corpus.train_fraction must lie in (0, 1), got {}", c.train_fraction)));
        }
        if c.image_size != self.model.image_size {
            return Err(Error::Config(format!(
                "corpus.image_size {} differs from model.image_size {}",
                c.image_size, self.model.image_size
            )));
        }
        self.model.validate().map_err(|e| Error::Config(format!("model: {e}")))?;
        self.train.validate()?;
        self.probe.validate()
    }

    /// Hex SHA-256 of the canonical JSON serialization, defaults included.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
