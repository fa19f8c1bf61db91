use std::path::PathBuf;

use redt_core::losses_metrics::{LossForm, LossParams};
use redt_core::model::ModelConfig;
use redt_core::numerics::{AdamWConfig, LRSchedule};
use redt_core::train::TrainSettings;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// Everything that determines a training run. All randomness derives from
/// `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: PathBuf,
    pub model: ModelConfig,
    pub lambda: f64,
    pub alpha: f64,
    pub optimizer: AdamWConfig,
    /// `schedule.total_iters` is overridden by `total_iters`.
    pub schedule: LRSchedule,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub total_iters: u64,
    pub seed: u64,
    pub rel_bias_enabled: bool,
    pub d_clip: Option<f64>,
    pub loss_form: LossForm,
    /// Random flip and photometric jitter of training samples.
    pub augment: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            model: ModelConfig::default(),
            lambda: 0.85,
            alpha: 10.0,
            optimizer: AdamWConfig::default(),
            schedule: LRSchedule::default(),
            clip_norm: 0.1,
            batch_size: 4,
            accum_steps: 2,
            total_iters: 2000,
            seed: 0,
            rel_bias_enabled: true,
            d_clip: None,
            loss_form: LossForm::Printed,
            augment: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> AppResult<()> {
        self.model.validate()?;
        if self.batch_size == 0 || self.accum_steps == 0 || self.total_iters == 0 {
            return Err(AppError::Usage("batch_size, accum_steps and total_iters must be positive".into()));
        }
        self.settings().schedule.validate()?;
        if let Some(c) = self.d_clip {
            let b = &self.model.bins;
            if !(c > b.d_min && c <= b.d_max) {
                return Err(AppError::Usage(format!("d_clip {c} outside ({}, {}]", b.d_min, b.d_max)));
            }
        }
        Ok(())
    }

    pub fn loss(&self) -> LossParams {
        LossParams { lambda: self.lambda, alpha: self.alpha, form: self.loss_form }
    }

    pub fn settings(&self) -> TrainSettings {
        TrainSettings {
            loss: self.loss(),
            optimizer: self.optimizer,
            schedule: LRSchedule { total_iters: self.total_iters, ..self.schedule },
            clip_norm: self.clip_norm,
            bn_train: true,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_json_fills_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"seed": 3, "loss_form": "conventional", "d_clip": 10.0}"#).unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.loss_form, LossForm::Conventional);
        assert_eq!(c.batch_size, 4);
        c.validate().unwrap();
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 3}"#).is_err());
    }

    #[test]
    fn schedule_length_follows_total_iters() {
        let c = RunConfig { total_iters: 77, ..RunConfig::default() };
        assert_eq!(c.settings().schedule.total_iters, 77);
    }
}
