//! Training hyperparameters and the learning-rate schedule.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::GateLoss;
use crate::nn::AdamConfig;

/// One stage of the piecewise-constant learning-rate schedule: `lr` applies
/// from `start_iteration` until the next stage begins (the last stage is a
/// floor).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrStage {
    pub start_iteration: u64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Weight of the style-embedding term in the total loss.
    pub lambda: f64,
    pub lr_stages: Vec<LrStage>,
    /// Fraction of the corpus held out for validation (0.1 = a 9:1 split).
    pub valid_fraction: f64,
    pub seed: u64,
    pub max_iterations: u64,
    pub checkpoint_interval: u64,
    pub gate_loss: GateLoss,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            lambda: 0.3,
            lr_stages: vec![
                LrStage { start_iteration: 0, lr: 1e-3 },
                LrStage { start_iteration: 50_000, lr: 5e-4 },
                LrStage { start_iteration: 100_000, lr: 3e-4 },
            ],
            valid_fraction: 0.1,
            seed: 42,
            max_iterations: 200_000,
            checkpoint_interval: 1_000,
            gate_loss: GateLoss::default(),
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TrainConfigError {
    #[error("batch size must be >= 1")]
    BatchSize,
    #[error("lambda must be finite and >= 0, got {0}")]
    Lambda(f64),
    #[error("learning-rate schedule must be non-empty and start at iteration 0")]
    ScheduleStart,
    #[error("schedule iterations must be strictly increasing ({prev} then {next})")]
    ScheduleOrder { prev: u64, next: u64 },
    #[error("learning rates must be positive, finite, and non-increasing")]
    ScheduleRates,
    #[error("valid fraction must lie in (0, 1), got {0}")]
    ValidFraction(f64),
    #[error("checkpoint interval must be >= 1")]
    CheckpointInterval,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainConfigError> {
        if self.batch_size == 0 {
            return Err(TrainConfigError::BatchSize);
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(TrainConfigError::Lambda(self.lambda));
        }
        match self.lr_stages.first() {
            Some(first) if first.start_iteration == 0 => {}
            _ => return Err(TrainConfigError::ScheduleStart),
        }
        for pair in self.lr_stages.windows(2) {
            if pair[1].start_iteration <= pair[0].start_iteration {
                return Err(TrainConfigError::ScheduleOrder {
                    prev: pair[0].start_iteration,
                    next: pair[1].start_iteration,
                });
            }
            if pair[1].lr > pair[0].lr {
                return Err(TrainConfigError::ScheduleRates);
            }
        }
        if self.lr_stages.iter().any(|s| !s.lr.is_finite() || s.lr <= 0.0) {
            return Err(TrainConfigError::ScheduleRates);
        }
        if !(self.valid_fraction > 0.0 && self.valid_fraction < 1.0) {
            return Err(TrainConfigError::ValidFraction(self.valid_fraction));
        }
        if self.checkpoint_interval == 0 {
            return Err(TrainConfigError::CheckpointInterval);
        }
        Ok(())
    }

    /// Learning rate in effect at `iteration`: the last stage whose start
    /// is not in the future.
    pub fn lr_at(&self, iteration: u64) -> f64 {
        self.lr_stages
            .iter()
            .rev()
            .find(|s| s.start_iteration <= iteration)
            .map(|s| s.lr)
            .expect("validated schedule starts at 0")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schedule_hits_the_published_boundaries() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 1e-3);
        assert_eq!(cfg.lr_at(49_999), 1e-3);
        assert_eq!(cfg.lr_at(50_000), 5e-4);
        assert_eq!(cfg.lr_at(99_999), 5e-4);
        assert_eq!(cfg.lr_at(100_000), 3e-4);
        assert_eq!(cfg.lr_at(1_000_000), 3e-4);
    }

    #[test]
    fn schedule_is_non_increasing() {
        let cfg = TrainConfig::default();
        let mut prev = f64::INFINITY;
        for it in (0..200_000).step_by(1_000) {
            let lr = cfg.lr_at(it);
            assert!(lr <= prev, "lr rose at iteration {it}");
            prev = lr;
        }
    }

    #[test]
    fn validation_rejects_out_of_order_stages() {
        let mut cfg = TrainConfig::default();
        cfg.lr_stages[2].start_iteration = 50_000;
        assert_eq!(
            cfg.validate(),
            Err(TrainConfigError::ScheduleOrder { prev: 50_000, next: 50_000 })
        );
    }

    #[test]
    fn validation_rejects_rising_rates_and_bad_lambda() {
        let mut cfg = TrainConfig::default();
        cfg.lr_stages[1].lr = 2e-3;
        assert_eq!(cfg.validate(), Err(TrainConfigError::ScheduleRates));

        let mut cfg = TrainConfig::default();
        cfg.lambda = -0.1;
        assert_eq!(cfg.validate(), Err(TrainConfigError::Lambda(-0.1)));
    }

    #[test]
    fn default_config_is_valid() {
        TrainConfig::default().validate().unwrap();
    }
}
