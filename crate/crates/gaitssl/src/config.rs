//! Run configuration: one JSON document binding dataset paths, augmentation
//! specs, encoder shape, training and protocol settings.
//!
//! Resolution order: command-line flags override file values, which override
//! the built-in defaults. Every run writes the fully resolved configuration
//! as `config.resolved` next to its outputs; re-running with that file as
//! `--config` reproduces the run.

use crate::augment::{GeneralAugmentSpec, StrongAugmentSpec};
use crate::cffn::EncoderConfig;
use crate::error::{Error, Result};
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl std::str::FromStr for Precision {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(format!("unknown precision {other:?} (use f32 or f64)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub ratio: f64,
    /// Seed for the train/test shuffle; defaults to the global seed.
    pub seed: Option<u64>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            ratio: 0.8,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub dataset: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub split: SplitConfig,
    pub general_augment: GeneralAugmentSpec,
    pub strong_augment: StrongAugmentSpec,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            precision: Precision::F32,
            dataset: None,
            out_dir: None,
            split: SplitConfig::default(),
            general_augment: GeneralAugmentSpec::default(),
            strong_augment: StrongAugmentSpec::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split ratio must lie in (0,1), got {}",
                self.split.ratio
            )));
        }
        self.general_augment.validate()?;
        self.strong_augment.validate()?;
        self.encoder.validate()?;
        self.train.validate()?;
        self.synth.validate()?;
        Ok(())
    }

    pub fn split_seed(&self) -> u64 {
        self.split.seed.unwrap_or(self.seed)
    }

    /// Serialize the resolved configuration next to run outputs.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
        let path = dir.join("config.resolved");
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(&path, text).map_err(|e| Error::Io { path, source: e })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    #[test]
    fn defaults_follow_published_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.train.tau, 0.07);
        assert_eq!(cfg.train.momentum, 0.999);
        assert_eq!(cfg.train.bank_capacity, 2560);
        assert_eq!(cfg.train.epochs, 500);
        assert_eq!(cfg.train.lr, 0.001);
        assert_eq!(cfg.train.lr_drop_epoch, 400);
        assert_eq!(cfg.encoder.projector_dim, 128);
        assert_eq!(cfg.split.ratio, 0.8);
        assert_eq!(cfg.train.alpha, 1.0);
        assert_eq!(cfg.train.beta, 1.0);
        cfg.validate().unwrap();
    }

    #[test]
    fn resolved_config_roundtrips() {
        let mut cfg = RunConfig::default();
        cfg.seed = 42;
        cfg.train.epochs = 7;
        let dir = TempDir::new().unwrap();
        cfg.write_resolved(dir.path()).unwrap();
        let back = RunConfig::from_file(&dir.path().join("config.resolved")).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let dir = TempDir::new().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"seed": 9, "train": {"epochs": 3}}"#).unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.bank_capacity, 2560); // untouched default
    }
}
