//! Training configuration, readable from and writable to TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::optim::AdamConfig;
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::synth::AugmentConfig;

/// Every key is optional in the TOML file; missing keys take the defaults below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Directory written by `generate-data`.
    pub dataset: PathBuf,
    /// Artifacts (checkpoints, metrics, config snapshot) are written here.
    pub run_dir: PathBuf,
    pub epochs: usize,
    pub lr: f64,
    /// L2 coefficient added to every gradient.
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate after every epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    /// Training resolution; samples are resampled to `side × side`.
    pub side: usize,
    pub seed: u64,
    /// Members trained by `train`; member `k` uses seed `seed + k`.
    pub ensemble: usize,
    /// Probability threshold for masks and IoU.
    pub threshold: f64,
    /// Use at most this many training samples.
    pub max_train_samples: Option<usize>,
    pub adam: AdamConfig,
    pub augment: AugmentConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            dataset: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
            epochs: 200,
            lr: 1e-3,
            weight_decay: 1e-7,
            lr_decay: 0.98,
            batch_size: 4,
            side: 256,
            seed: 0,
            ensemble: 5,
            threshold: 0.5,
            max_train_samples: None,
            adam: AdamConfig::default(),
            augment: AugmentConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.ensemble == 0 {
            return bad("epochs, batch_size and ensemble must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad("lr_decay must lie in (0, 1]");
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)");
        }
        let f = self.model.scales.coarsest();
        if self.side == 0 || !self.side.is_multiple_of(f) {
            return Err(Error::Config(format!(
                "side {} must be a positive multiple of the coarsest scale factor {f}",
                self.side
            )));
        }
        if !(self.augment.noise_variance >= 0.0) {
            return bad("augment.noise_variance must be non-negative");
        }
        self.adam.validate()?;
        self.loss.validate()?;
        self.model.validate()
    }

    /// Learning rate in effect during epoch `epoch` (zero-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }
}
