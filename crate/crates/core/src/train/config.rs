use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Dice,
    FocalTversky,
}

/// Training recipe. Every field can be overridden from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub momentum: f64,
    pub initial_lr: f64,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    /// Smallest val-dice gain that counts as an improvement.
    pub min_delta: f64,
    pub loss: LossKind,
    /// Square side the images are resized to.
    pub image_size: usize,
    pub eval_batch_size: usize,
    /// Truncate the training split (toy runs).
    pub max_train_samples: Option<usize>,
    pub max_val_samples: Option<usize>,
    /// Wall-clock limit per run in seconds.
    pub time_budget_secs: Option<f64>,
    pub save_checkpoint: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            max_epochs: 60,
            momentum: 0.9,
            initial_lr: 0.01,
            plateau_patience: 15,
            plateau_factor: 0.1,
            early_stop_patience: 30,
            min_delta: 1e-4,
            loss: LossKind::Dice,
            image_size: 256,
            eval_batch_size: 8,
            max_train_samples: None,
            max_val_samples: None,
            time_budget_secs: None,
            save_checkpoint: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.batch_size == 0 || self.max_epochs == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes and max_epochs must be positive");
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must be in (0, 1)");
        }
        if self.plateau_patience == 0 || self.plateau_patience >= self.early_stop_patience {
            return bad("need 0 < plateau_patience < early_stop_patience");
        }
        if self.min_delta < 0.0 {
            return bad("min_delta must be non-negative");
        }
        if self.image_size == 0 || self.image_size % 16 != 0 {
            return bad("image_size must be a positive multiple of 16");
        }
        if self.max_train_samples == Some(0) || self.max_val_samples == Some(0) {
            return bad("sample limits must be positive");
        }
        if self.time_budget_secs.is_some_and(|t| !(t > 0.0)) {
            return bad("time_budget_secs must be positive");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Small settings for smoke runs: 16 training images, 3 epochs, 64 px.
    pub fn toy() -> Self {
        Self {
            batch_size: 4,
            max_epochs: 3,
            image_size: 64,
            max_train_samples: Some(16),
            max_val_samples: Some(8),
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_valid_and_round_trip() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!(TrainConfig::from_toml_str(&c.to_toml().unwrap()).unwrap(), c);
    }

    #[test]
    fn partial_override() {
        let c = TrainConfig::from_toml_str("max_epochs = 3\nbatch_size = 2\n").unwrap();
        assert_eq!((c.max_epochs, c.batch_size, c.initial_lr), (3, 2, 0.01));
    }

    #[test]
    fn rejects_bad_values() {
        for s in [
            "plateau_patience = 30",
            "batch_size = 0",
            "initial_lr = -1.0",
            "image_size = 100",
            "unknown_key = 1",
        ] {
            assert!(TrainConfig::from_toml_str(s).is_err(), "{s}");
        }
    }
}
