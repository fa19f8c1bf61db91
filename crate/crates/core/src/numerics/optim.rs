#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{ParamKind, ParamStore, Scalar};
use crate::error::{bail, Result};

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epsilon: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, weight_decay: 0.1, epsilon: 1e-8 }
    }
}

/// Moments and step counter of AdamW, one slot per store entry.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub first_moment: Vec<Vec<T>>,
    pub second_moment: Vec<Vec<T>>,
    pub step: u64,
    pub config: AdamWConfig,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(store: &ParamStore<T>, config: AdamWConfig) -> Self {
        let zeros: Vec<Vec<T>> = store
            .entries()
            .iter()
            .map(|e| if e.kind == ParamKind::Buffer { Vec::new() } else { vec![T::zero(); e.tensor.len()] })
            .collect();
        Self { first_moment: zeros.clone(), second_moment: zeros, step: 0, config }
    }
}

/// One decoupled-weight-decay update of a single tensor.
///
/// `step` is the 1-based step index used for bias correction.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    config: &AdamWConfig,
    lr: f64,
    decay: bool,
) -> Result<()> {
    if param.len() != grad.len() || m.len() != param.len() || v.len() != param.len() {
        bail!(Usage, "adamw shapes disagree: param {}, grad {}, moments {}/{}", param.len(), grad.len(), m.len(), v.len());
    }
    if step == 0 {
        bail!(Usage, "adamw step index is 1-based");
    }
    let cf = |x: f64| T::from_f64_lossy(x);
    let (b1, b2) = (cf(config.beta1), cf(config.beta2));
    let bc1 = cf(1.0 - config.beta1.powi(step as i32));
    let bc2 = cf(1.0 - config.beta2.powi(step as i32));
    let lr_t = cf(lr);
    let eps = cf(config.epsilon);
    let shrink = if decay { cf(1.0 - lr * config.weight_decay) } else { T::one() };
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] = param[i] * shrink - lr_t * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Applies one AdamW step to every trainable entry of `store` using the
/// gradients stored on it. Entries without a gradient are treated as having
/// a zero gradient.
pub fn adamw_step<T: Scalar>(store: &mut ParamStore<T>, state: &mut OptimizerState<T>, lr: f64) -> Result<()> {
    if state.first_moment.len() != store.len() {
        bail!(Usage, "optimizer state built for {} parameters, store has {}", state.first_moment.len(), store.len());
    }
    state.step += 1;
    let step = state.step;
    let config = state.config;
    for (i, e) in store.entries_mut().iter_mut().enumerate() {
        if !e.trainable() {
            continue;
        }
        let decay = e.kind == ParamKind::Weight;
        let zeros;
        let grad: &[T] = match &e.tensor.grad {
            Some(g) => g,
            None => {
                zeros = vec![T::zero(); e.tensor.len()];
                &zeros
            }
        };
        let grad = grad.to_vec();
        adamw_update(
            e.tensor.data_mut(),
            &grad,
            &mut state.first_moment[i],
            &mut state.second_moment[i],
            step,
            &config,
            lr,
            decay,
        )?;
    }
    Ok(())
}

/// Global L2 norm of all gradients, accumulated in order.
pub fn global_grad_norm<T: Scalar>(store: &ParamStore<T>) -> f64 {
    let mut sq = 0.0f64;
    for e in store.entries() {
        if let Some(g) = &e.tensor.grad {
            for &v in g {
                let v = v.to_f64_lossy();
                sq += v * v;
            }
        }
    }
    sq.sqrt()
}

/// Rescales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(store: &mut ParamStore<T>, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 || !max_norm.is_finite() {
        bail!(Usage, "max_norm must be positive, got {max_norm}");
    }
    let norm = global_grad_norm(store);
    if norm > max_norm {
        let s = T::from_f64_lossy(max_norm / norm);
        for e in store.entries_mut() {
            if let Some(g) = &mut e.tensor.grad {
                g.iter_mut().for_each(|v| *v = *v * s);
            }
        }
    }
    Ok(norm)
}
