#[allow(unused_imports)]
use num_traits::Float as _;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Linear warmup to `lr_max`, then linear decay to `lr_end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LRSchedule {
    pub lr_start: f64,
    pub lr_max: f64,
    pub lr_end: f64,
    pub total_iters: u64,
    pub warmup_fraction: f64,
}

impl Default for LRSchedule {
    fn default() -> Self {
        Self { lr_start: 4e-6, lr_max: 1e-4, lr_end: 1e-6, total_iters: 1000, warmup_fraction: 0.25 }
    }
}

impl LRSchedule {
    pub fn validate(&self) -> Result<()> {
        let non_negative = [self.lr_start, self.lr_max, self.lr_end].iter().all(|v| *v >= 0.0 && v.is_finite());
        if !non_negative || self.total_iters == 0 || !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            bail!(Config, "invalid learning-rate schedule {self:?}");
        }
        Ok(())
    }

    /// Iteration at which the peak learning rate is reached.
    pub fn warmup_iters(&self) -> u64 {
        (self.warmup_fraction * self.total_iters as f64).floor() as u64
    }

    pub fn lr_at(&self, iter: u64) -> Result<f64> {
        if iter > self.total_iters {
            bail!(Usage, "iteration {iter} beyond schedule length {}", self.total_iters);
        }
        let warm = self.warmup_iters();
        let lerp = |a: f64, b: f64, t: f64| a * (1.0 - t) + b * t;
        Ok(if iter <= warm {
            if warm == 0 {
                self.lr_max
            } else {
                lerp(self.lr_start, self.lr_max, iter as f64 / warm as f64)
            }
        } else {
            lerp(self.lr_max, self.lr_end, (iter - warm) as f64 / (self.total_iters - warm) as f64)
        })
    }
}
