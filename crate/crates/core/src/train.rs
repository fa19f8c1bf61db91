//! One optimizer step: gradient accumulation over micro-batches, global-norm
//! clipping, AdamW with the scheduled learning rate, and batch-norm running
//! statistics.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{bail, Result};
use crate::losses_metrics::{total_loss, LossParams};
use crate::model::{apply_bn_updates, BnMode, Model, BN_MOMENTUM};
use crate::numerics::{adamw_step, clip_global_norm, global_grad_norm, AdamWConfig, Graph, LRSchedule, OptimizerState, ParamStore, Scalar};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub loss: LossParams,
    pub optimizer: AdamWConfig,
    pub schedule: LRSchedule,
    pub clip_norm: f64,
    /// Normalization mode used for the forward pass while training.
    pub bn_train: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { loss: LossParams::default(), optimizer: AdamWConfig::default(), schedule: LRSchedule::default(), clip_norm: 0.1, bn_train: true }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub iter: u64,
    pub lr: f64,
    /// Mean of the micro-batch totals.
    pub loss: f64,
    pub per_map: Vec<f64>,
    pub grad_norm: f64,
    /// Samples per map whose loss radicand was not positive.
    pub clamped: usize,
}

/// Forward and backward of one micro-batch, adding `scale·∂L/∂θ` into the
/// store's gradients. Returns the unscaled total loss and per-map losses.
pub fn accumulate_gradients<T: Scalar>(
    model: &Model,
    store: &mut ParamStore<T>,
    batch: &Batch<T>,
    loss: &LossParams,
    mode: BnMode,
    scale: f64,
) -> Result<(f64, Vec<f64>, usize, Vec<crate::model::BnUpdate<T>>)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, store, &batch.images, mode)?;
    let tl = total_loss(&mut g, &out.depths, &batch.labels, loss)?;
    if !tl.value.is_finite() {
        bail!(Numerical, "non-finite loss {}", tl.value);
    }
    let scaled = g.scale(tl.loss, T::from_f64_lossy(scale))?;
    let grads = g.backward(scaled)?;
    grads.accumulate_into(&g, store)?;
    Ok((tl.value, tl.per_map, tl.clamped, out.bn_updates))
}

/// Owns the optimizer state and the iteration counter.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    pub settings: TrainSettings,
    pub state: OptimizerState<T>,
    pub iter: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(settings: TrainSettings, store: &ParamStore<T>) -> Result<Self> {
        settings.schedule.validate()?;
        if !(settings.clip_norm > 0.0) {
            bail!(Config, "clip norm must be positive, got {}", settings.clip_norm);
        }
        let state = OptimizerState::new(store, settings.optimizer);
        Ok(Self { settings, state, iter: 0 })
    }

    /// One optimizer step over `micro` batches, each contributing `1/len`
    /// of its gradient. Parameters are untouched if any loss or the
    /// gradient norm is not finite.
    pub fn step(&mut self, model: &Model, store: &mut ParamStore<T>, micro: &[Batch<T>]) -> Result<StepStats> {
        if micro.is_empty() {
            bail!(Usage, "optimizer step without micro-batches");
        }
        let lr = self.settings.schedule.lr_at(self.iter)?;
        let mode = if self.settings.bn_train { BnMode::Train } else { BnMode::Eval };
        store.zero_grads();
        let scale = 1.0 / micro.len() as f64;
        let mut loss = 0.0;
        let mut per_map: Vec<f64> = Vec::new();
        let mut clamped = 0;
        let mut updates = Vec::new();
        for b in micro {
            let (l, pm, c, u) = accumulate_gradients(model, store, b, &self.settings.loss, mode, scale)?;
            loss += l * scale;
            if per_map.is_empty() {
                per_map = alloc::vec![0.0; pm.len()];
            }
            per_map.iter_mut().zip(&pm).for_each(|(a, &v)| *a += v * scale);
            clamped += c;
            updates.extend(u);
        }
        if !global_grad_norm(store).is_finite() {
            store.zero_grads();
            bail!(Numerical, "non-finite gradient norm at iteration {}", self.iter);
        }
        let grad_norm = clip_global_norm(store, self.settings.clip_norm)?;
        adamw_step(store, &mut self.state, lr)?;
        apply_bn_updates(store, &updates, BN_MOMENTUM);
        let stats = StepStats { iter: self.iter, lr, loss, per_map, grad_norm, clamped };
        self.iter += 1;
        Ok(stats)
    }
}
