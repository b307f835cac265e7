use serde::{Deserialize, Serialize};

use super::adam::AdamConfig;
use crate::error::{Error, Result};
use crate::losses::{FocalLossConfig, Objective};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Extractor,
    Predictor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Last epoch trained at `base_lr`; later epochs use `late_lr`. `None`
    /// keeps `base_lr` throughout.
    pub switch_epoch: Option<usize>,
    pub late_lr: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    pub objective: Objective,
    pub seed: u64,
    pub folds: usize,
}

impl TrainConfig {
    /// 400 epochs, batch 64, learning rate 1e-3 dropping to 1e-4 after
    /// epoch 200, focal loss.
    pub fn predictor_paper() -> Self {
        Self {
            phase: Phase::Predictor,
            epochs: 400,
            batch_size: 64,
            base_lr: 1e-3,
            switch_epoch: Some(200),
            late_lr: 1e-4,
            adam: AdamConfig::default(),
            objective: Objective::Focal(FocalLossConfig::default()),
            seed: 42,
            folds: 5,
        }
    }

    /// 100 epochs with the drop at the same relative point (epoch 50).
    pub fn predictor_desk() -> Self {
        Self {
            epochs: 100,
            switch_epoch: Some(50),
            ..Self::predictor_paper()
        }
    }

    /// 100 epochs, batch 32, constant learning rate 1e-3, cross-entropy.
    pub fn extractor_paper() -> Self {
        Self {
            phase: Phase::Extractor,
            epochs: 100,
            batch_size: 32,
            base_lr: 1e-3,
            switch_epoch: None,
            late_lr: 1e-3,
            adam: AdamConfig::default(),
            objective: Objective::CrossEntropy,
            seed: 42,
            folds: 5,
        }
    }

    pub fn extractor_desk() -> Self {
        Self {
            epochs: 20,
            ..Self::extractor_paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be at least 1"));
        }
        if let Some(s) = self.switch_epoch {
            if s > self.epochs {
                return Err(Error::config(format!(
                    "schedule switch at epoch {s} exceeds {} epochs",
                    self.epochs
                )));
            }
        }
        if !(self.base_lr > 0.0 && self.late_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if self.folds < 2 {
            return Err(Error::config("cross-validation needs at least 2 folds"));
        }
        if let Objective::Focal(f) = &self.objective {
            f.validate()?;
        }
        Ok(())
    }
}

/// Learning rate for a 1-based epoch.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    match (cfg.phase, cfg.switch_epoch) {
        (Phase::Predictor, Some(s)) if epoch > s => cfg.late_lr,
        _ => cfg.base_lr,
    }
}
