//! Fully resolved run configuration, written next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::retrieval::EvalOptions;
use crate::train::TrainConfig;

pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset manifest.
    pub dataset: Option<PathBuf>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset manifest given".into()))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.feature_shape()?;
        self.model.transport.sinkhorn.validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut c = RunConfig::default();
        c.seed = 7;
        c.dataset = Some("data/manifest.json".into());
        c.train.learning_rate = 1e-2;
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"seed": 3, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, 12);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_field_is_rejected() {
        let err = RunConfig::from_json(r#"{"sed": 3}"#).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn small_batch_fails_validation() {
        let mut c = RunConfig::default();
        c.train.batch_size = 1;
        assert!(matches!(c.validate(), Err(Error::BatchTooSmall(1))));
    }
}
