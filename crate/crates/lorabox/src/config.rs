//! TOML run configurations. Missing keys take their defaults, unknown keys
//! are errors, and the fully resolved configuration is written next to
//! every command's outputs.

use std::path::{Path, PathBuf};

use lorabox_core::eval::DEFAULT_IOU_THRESHOLD;
use lorabox_core::model::ModelConfig;
use lorabox_core::train::TrainerConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::synth::SynthConfig;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid config {path}: {source}")]
    Parse { path: String, source: toml::de::Error },
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    toml::from_str(&text).map_err(|source| ConfigError::Parse { path: path.display().to_string(), source })
}

pub fn to_toml<T: Serialize>(cfg: &T) -> String {
    toml::to_string_pretty(cfg).expect("config serializes to TOML")
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    /// Training samples (JSON lines as written by `synth`).
    pub train: PathBuf,
    /// Validation samples; when absent the training file is split 90/10
    /// by a hash of each sample id.
    pub val: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub data: DataPaths,
    pub model: ModelConfig,
    pub trainer: TrainerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalRunConfig {
    pub data: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub iou_threshold: f64,
}

impl Default for EvalRunConfig {
    fn default() -> Self {
        Self { data: PathBuf::new(), checkpoint: None, predictions: None, iou_threshold: DEFAULT_IOU_THRESHOLD }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestRunConfig {
    pub scenes: PathBuf,
    pub out: PathBuf,
    pub workers: usize,
}

impl Default for IngestRunConfig {
    fn default() -> Self {
        Self { scenes: PathBuf::new(), out: PathBuf::new(), workers: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthRunConfig {
    pub synth: SynthConfig,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_takes_defaults() {
        let cfg: TrainRunConfig = toml::from_str("[data]\ntrain = \"a.jsonl\"\n[trainer.schedule]\ntransition_epoch = 33\n").unwrap();
        assert_eq!(cfg.data.train, PathBuf::from("a.jsonl"));
        assert_eq!(cfg.trainer.schedule.transition_epoch, 33);
        assert_eq!(cfg.trainer.schedule.total_epochs, 100);
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(toml::from_str::<TrainRunConfig>("[model]\nd_modle = 3\n").is_err());
        assert!(toml::from_str::<TrainRunConfig>("epochs = 3\n").is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let cfg = TrainRunConfig::default();
        let back: TrainRunConfig = toml::from_str(&to_toml(&cfg)).unwrap();
        assert_eq!(back, cfg);
        let s = SynthRunConfig::default();
        assert_eq!(toml::from_str::<SynthRunConfig>(&to_toml(&s)).unwrap(), s);
    }
}
