//! Depth-relative attention bias.
//!
//! A dense depth map is cut into `N_b` uniform bins; for every token pair in
//! a window the signed bin difference selects a row of the learnable table
//! θ_DE (`(2N_b − 1) × N_h`), and that row's per-head values become the
//! additive attention logits `R`. Row `N_b − 1` is the zero difference.
//!
//! Bins are computed from plain values, never from a graph node, so no
//! gradient can reach the depth map through the bias. θ_DE receives gradient
//! through the gather (scatter-add of the upstream bias gradient).

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attention::WindowLayout;
use crate::error::{bail, Result};
use crate::numerics::{Graph, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};

#[allow(unused_imports)]
use num_traits::Float as _;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BinConfig {
    pub d_min: f64,
    pub d_max: f64,
    pub num_bins: usize,
}

impl BinConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bins < 2 {
            bail!(Config, "need at least 2 depth bins, got {}", self.num_bins);
        }
        if !(self.d_min.is_finite() && self.d_max.is_finite() && self.d_max > self.d_min) {
            bail!(Config, "depth range [{}, {}] is empty", self.d_min, self.d_max);
        }
        Ok(())
    }

    /// Number of distinct signed bin differences, `2N_b − 1`.
    pub fn classes(&self) -> usize {
        2 * self.num_bins - 1
    }

    /// Uniform bin of one depth value, clamped into `[0, N_b − 1]`.
    pub fn bin(&self, d: f64) -> usize {
        let t = (d - self.d_min) / (self.d_max - self.d_min) * self.num_bins as f64;
        let b = t.floor();
        if b <= 0.0 {
            0
        } else if b >= (self.num_bins - 1) as f64 {
            self.num_bins - 1
        } else {
            b as usize
        }
    }
}

/// Bins every value of a depth raster.
pub fn discretize<T: Scalar>(depths: &[T], cfg: &BinConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    depths
        .iter()
        .map(|&d| {
            let d = d.to_f64_lossy();
            if !d.is_finite() {
                bail!(Numerical, "cannot discretize non-finite depth {d}");
            }
            Ok(cfg.bin(d))
        })
        .collect()
}

/// Signed bin difference `b_p − b_q` as the table would index it without offset.
pub fn raw_difference(b_p: usize, b_q: usize) -> i64 {
    b_p as i64 - b_q as i64
}

/// Table row for a bin pair: `(b_p − b_q) + N_b − 1`.
pub fn relative_index(b_p: usize, b_q: usize, num_bins: usize) -> Result<usize> {
    if b_p >= num_bins || b_q >= num_bins {
        bail!(Usage, "bins ({b_p}, {b_q}) outside [0, {})", num_bins);
    }
    Ok(b_p + num_bins - 1 - b_q)
}

/// One block's θ_DE.
#[derive(Debug, Clone)]
pub struct BiasEmbeddingTable {
    pub theta: ParamId,
    pub bins: BinConfig,
    pub num_heads: usize,
}

impl BiasEmbeddingTable {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, bins: BinConfig, num_heads: usize) -> Result<Self> {
        bins.validate()?;
        let theta = store.register(name, Tensor::zeros(&[bins.classes(), num_heads]), ParamKind::NoDecay)?;
        Ok(Self { theta, bins, num_heads })
    }

    /// Indices into the flattened table producing `R[h][p][q]` for one
    /// window of token bins.
    pub fn window_indices(&self, bins: &[usize]) -> Result<Vec<usize>> {
        let nh = self.num_heads;
        let n = bins.len();
        let mut idx = Vec::with_capacity(nh * n * n);
        for h in 0..nh {
            for &bp in bins {
                for &bq in bins {
                    idx.push(relative_index(bp, bq, self.bins.num_bins)? * nh + h);
                }
            }
        }
        Ok(idx)
    }

    /// `R` for a single window of bins, shaped `N_h × n × n`.
    pub fn build_bias<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, bins: &[usize]) -> Result<Var> {
        let n = bins.len();
        let idx = self.window_indices(bins)?;
        let theta = g.param(store, self.theta);
        g.gather(theta, idx, &[self.num_heads, n, n])
    }

    /// `R` for every window of a binned `B×H×W` raster, shaped
    /// `(windows·N_h) × n × n` in the group order used by the attention block.
    pub fn build_bias_windows<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bins: &[usize],
        layout: &WindowLayout,
    ) -> Result<Var> {
        if bins.len() != layout.pixels() {
            bail!(Shape, "{} bins for a layout of {} pixels", bins.len(), layout.pixels());
        }
        let order = layout.token_order();
        let n = layout.tokens();
        let mut idx = Vec::with_capacity(layout.num_windows() * self.num_heads * n * n);
        let mut window = Vec::with_capacity(n);
        for w in 0..layout.num_windows() {
            window.clear();
            window.extend(order[w * n..(w + 1) * n].iter().map(|&p| bins[p]));
            idx.extend(self.window_indices(&window)?);
        }
        let theta = g.param(store, self.theta);
        g.gather(theta, idx, &[layout.num_windows() * self.num_heads, n, n])
    }
}
