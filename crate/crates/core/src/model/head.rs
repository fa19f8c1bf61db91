//! Iterative depth-relative head.
//!
//! Each iteration bins the previous depth map, builds the per-window bias
//! from every block's own θ_DE, runs the blocks over the feature and reads
//! a refined depth map from it.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::backbone::fit_window;
use super::config::ModelConfig;
use super::layers::{Conv2d, DepthwiseConv2d, LayerNorm, Linear};
use crate::attention::{mhsa_block, AttentionConfig, MhsaParams, WindowLayout};
use crate::error::{bail, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Var};
use crate::relbias::{discretize, BiasEmbeddingTable, BinConfig};

/// Depth readout: three 3×3 convolutions, sigmoid, scaled into the range.
#[derive(Debug, Clone)]
pub struct Deb {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub conv3: Conv2d,
    pub d_min: f64,
    pub d_max: f64,
}

impl Deb {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        hidden: usize,
        bins: &BinConfig,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::register(store, &format!("{name}.conv1"), in_ch, hidden, 3, true, rng)?,
            conv2: Conv2d::register(store, &format!("{name}.conv2"), hidden, hidden, 3, true, rng)?,
            conv3: Conv2d::register(store, &format!("{name}.conv3"), hidden, 1, 3, true, rng)?,
            d_min: bins.d_min,
            d_max: bins.d_max,
        })
    }

    /// Pre-activation `z` (`B×h×w×1`).
    pub fn logits<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let x = self.conv1.forward(g, store, x)?;
        let x = g.relu(x)?;
        let x = self.conv2.forward(g, store, x)?;
        let x = g.relu(x)?;
        self.conv3.forward(g, store, x)
    }

    /// `d_min + σ(z)·(d_max − d_min)`.
    pub fn readout<T: Scalar>(&self, g: &mut Graph<T>, z: Var) -> Result<Var> {
        let s = g.sigmoid(z)?;
        let s = g.scale(s, T::from_f64_lossy(self.d_max - self.d_min))?;
        g.add_scalar(s, T::from_f64_lossy(self.d_min))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let z = self.logits(g, store, x)?;
        self.readout(g, z)
    }
}

/// Feed-forward with a depthwise convolution between the gate and the
/// output projection: `x + proj(dw(GLU(expand(LN(x)))))`.
#[derive(Debug, Clone)]
pub struct Cff {
    pub norm: LayerNorm,
    pub expand: Linear,
    pub dwconv: DepthwiseConv2d,
    pub proj: Linear,
}

impl Cff {
    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, ch: usize, ratio: usize, rng: &mut R) -> Result<Self> {
        let hidden = ch * ratio;
        Ok(Self {
            norm: LayerNorm::register(store, &format!("{name}.norm"), ch)?,
            expand: Linear::register(store, &format!("{name}.expand"), ch, 2 * hidden, true, rng)?,
            dwconv: DepthwiseConv2d::register(store, &format!("{name}.dwconv"), hidden, 3, rng)?,
            proj: Linear::register(store, &format!("{name}.proj"), hidden, ch, true, rng)?,
        })
    }

    /// `x` is `B×h×w×C`; the convolution runs over the `h×w` token grid.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if g.shape(x).len() != 4 {
            bail!(Usage, "feed-forward tokens must form a B×h×w×C grid, got {:?}", g.shape(x));
        }
        let y = self.norm.forward(g, store, x)?;
        let y = self.expand.forward(g, store, y)?;
        let y = g.glu(y)?;
        let y = self.dwconv.forward(g, store, y)?;
        let y = self.proj.forward(g, store, y)?;
        g.add(x, y)
    }
}

#[derive(Debug, Clone)]
pub struct HeadBlock {
    pub attn: MhsaParams,
    pub theta: BiasEmbeddingTable,
    pub cff: Cff,
}

impl HeadBlock {
    /// One depth-relative attention block and its feed-forward, with the
    /// bias built from the bins of the (already detached) depth map.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, bins: &[usize]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let cfg = self.attn.config;
        let layout = WindowLayout::new(s[0], s[1], s[2], cfg.window, cfg.shift)?;
        let r = self.theta.build_bias_windows(g, store, bins, &layout)?;
        let x = mhsa_block(g, store, &self.attn, x, &layout, Some(r))?;
        self.cff.forward(g, store, x)
    }
}

#[derive(Debug, Clone)]
pub struct Head {
    /// `iterations[i][j]` is block `j` of iteration `i`.
    pub iterations: Vec<Vec<HeadBlock>>,
    /// `debs[0]` reads `D_0` from the neck; `debs[i + 1]` closes iteration `i`.
    pub debs: Vec<Deb>,
    pub bins: BinConfig,
}

impl Head {
    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let hc = &cfg.head;
        let c = cfg.neck_channels;
        let (h, w) = cfg.stage_size(0);
        let win = fit_window(hc.window, h, w);
        let shift = if win < h || win < w { hc.shift.min(win / 2) } else { 0 };
        let mut debs = Vec::with_capacity(hc.iterations + 1);
        debs.push(Deb::register(store, "head.deb0", c, hc.deb_channels, &cfg.bins, rng)?);
        let mut iterations = Vec::with_capacity(hc.iterations);
        for i in 0..hc.iterations {
            let mut blocks = Vec::with_capacity(hc.blocks_per_iteration);
            for j in 0..hc.blocks_per_iteration {
                let prefix = format!("head.iter{i}.block{j}");
                let acfg = AttentionConfig {
                    num_heads: hc.num_heads,
                    head_dim: c / hc.num_heads,
                    window: win,
                    shift: if j % 2 == 1 { shift } else { 0 },
                };
                blocks.push(HeadBlock {
                    attn: MhsaParams::register(store, &prefix, acfg, rng)?,
                    theta: BiasEmbeddingTable::register(store, &format!("{prefix}.theta_de"), cfg.bins, hc.num_heads)?,
                    cff: Cff::register(store, &format!("{prefix}.cff"), c, hc.cff_ratio, rng)?,
                });
            }
            iterations.push(blocks);
            debs.push(Deb::register(store, &format!("head.deb{}", i + 1), c, hc.deb_channels, &cfg.bins, rng)?);
        }
        Ok(Self { iterations, debs, bins: cfg.bins })
    }

    /// Iteration `i`: bins of `depth` (read as plain values, so no gradient
    /// reaches it from here) drive the blocks; returns the refined feature
    /// and `D_{i+1}`.
    pub fn iteration<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, i: usize, feature: Var, depth: Var) -> Result<(Var, Var)> {
        let bins = discretize(g.value(depth), &self.bins)?;
        let mut x = feature;
        for block in &self.iterations[i] {
            x = block.forward(g, store, x, &bins)?;
        }
        let d = self.debs[i + 1].forward(g, store, x)?;
        Ok((x, d))
    }

    /// `[D_0, …, D_K]` from the neck feature.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feature: Var) -> Result<Vec<Var>> {
        let mut depths = Vec::with_capacity(self.debs.len());
        depths.push(self.debs[0].forward(g, store, feature)?);
        let mut x = feature;
        for i in 0..self.iterations.len() {
            let (nx, d) = self.iteration(g, store, i, x, depths[i])?;
            x = nx;
            depths.push(d);
        }
        Ok(depths)
    }
}
