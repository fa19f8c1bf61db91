//! Windowed multi-head self-attention with an additive logit bias.
//!
//! The same block serves the backbone, where the bias is the position table
//! looked up by coordinate differences, and the head, where the bias comes
//! from discretized relative depth.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::numerics::{truncated_normal, Graph, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};

pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    /// Window side in pixels; a window holds `window²` tokens.
    pub window: usize,
    pub shift: usize,
}

impl AttentionConfig {
    pub fn dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 || self.window == 0 {
            bail!(Config, "attention needs positive heads, head_dim and window: {self:?}");
        }
        if self.shift >= self.window {
            bail!(Config, "shift {} must be smaller than window {}", self.shift, self.window);
        }
        Ok(())
    }
}

/// How a `B×H×W` grid is cut into (optionally cyclically shifted) windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowLayout {
    pub fn new(batch: usize, height: usize, width: usize, window: usize, shift: usize) -> Result<Self> {
        if window == 0 || height % window != 0 || width % window != 0 {
            bail!(Usage, "{height}×{width} grid is not divisible into {window}×{window} windows");
        }
        if shift >= window {
            bail!(Usage, "shift {shift} must be smaller than window {window}");
        }
        Ok(Self { batch, height, width, window, shift })
    }

    pub fn windows_per_image(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    pub fn num_windows(&self) -> usize {
        self.batch * self.windows_per_image()
    }

    pub fn tokens(&self) -> usize {
        self.window * self.window
    }

    pub fn pixels(&self) -> usize {
        self.batch * self.height * self.width
    }

    /// `order[t]` is the flat `(b, y, x)` pixel that lands at window-major
    /// token position `t`, after rolling the grid by `(−shift, −shift)`.
    pub fn token_order(&self) -> Vec<usize> {
        let (h, w, win, s) = (self.height, self.width, self.window, self.shift);
        let mut order = Vec::with_capacity(self.pixels());
        for b in 0..self.batch {
            for wy in 0..h / win {
                for wx in 0..w / win {
                    for ly in 0..win {
                        for lx in 0..win {
                            let y = (wy * win + ly + s) % h;
                            let x = (wx * win + lx + s) % w;
                            order.push((b * h + y) * w + x);
                        }
                    }
                }
            }
        }
        order
    }
}

/// Inverse record produced by [`window_partition`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowRecord {
    pub layout: WindowLayout,
    pub channels: usize,
    order: Vec<usize>,
}

fn image_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [h, w, c] => Ok((1, h, w, c)),
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => bail!(Shape, "expected H×W×C or B×H×W×C, got {shape:?}"),
    }
}

fn gather_rows<T: Scalar>(data: &[T], order: &[usize], channels: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(order.len() * channels);
    for &p in order {
        out.extend_from_slice(&data[p * channels..(p + 1) * channels]);
    }
    out
}

/// Cuts a feature map into windows of `w²` tokens, rolling by `(−shift, −shift)`
/// first when `shift > 0`. Output is `numWindows × w² × C`.
pub fn window_partition<T: Scalar>(feature: &Tensor<T>, w: usize, shift: usize) -> Result<(Tensor<T>, WindowRecord)> {
    let (b, h, wd, c) = image_dims(feature.shape())?;
    let layout = WindowLayout::new(b, h, wd, w, shift)?;
    let order = layout.token_order();
    let data = gather_rows(feature.data(), &order, c);
    let out = Tensor::new(alloc::vec![layout.num_windows(), layout.tokens(), c], data)?;
    Ok((out, WindowRecord { layout, channels: c, order }))
}

/// Exact inverse of [`window_partition`]; returns `B×H×W×C`.
pub fn window_unpartition<T: Scalar>(windows: &Tensor<T>, record: &WindowRecord) -> Result<Tensor<T>> {
    let l = &record.layout;
    let expect = [l.num_windows(), l.tokens(), record.channels];
    if windows.shape() != expect {
        return Err(Error::ShapeMismatch { op: "window_unpartition", expected: expect.to_vec(), got: windows.shape().to_vec() });
    }
    let c = record.channels;
    let mut out = alloc::vec![T::zero(); windows.len()];
    for (t, &p) in record.order.iter().enumerate() {
        out[p * c..(p + 1) * c].copy_from_slice(&windows.data()[t * c..(t + 1) * c]);
    }
    Tensor::new(alloc::vec![l.batch, l.height, l.width, c], out)
}

/// Table row of the position bias for every token pair of a `w×w` window:
/// `(Δy + w − 1)·(2w − 1) + (Δx + w − 1)` with `Δ = coord(p) − coord(q)`.
pub fn relative_position_index(w: usize) -> Vec<usize> {
    let n = w * w;
    let span = 2 * w - 1;
    let mut idx = Vec::with_capacity(n * n);
    for p in 0..n {
        let (py, px) = (p / w, p % w);
        for q in 0..n {
            let (qy, qx) = (q / w, q % w);
            let dy = py + w - 1 - qy;
            let dx = px + w - 1 - qx;
            idx.push(dy * span + dx);
        }
    }
    idx
}

/// Learnable `(2w−1)² × N_h` position bias and its precomputed index map.
#[derive(Debug, Clone)]
pub struct PositionBiasTable {
    pub table: ParamId,
    pub window: usize,
    pub num_heads: usize,
    index: Vec<usize>,
}

impl PositionBiasTable {
    pub fn register<T: Scalar>(store: &mut ParamStore<T>, name: &str, window: usize, num_heads: usize) -> Result<Self> {
        let rows = (2 * window - 1) * (2 * window - 1);
        let table = store.register(name, Tensor::zeros(&[rows, num_heads]), ParamKind::NoDecay)?;
        Ok(Self { table, window, num_heads, index: relative_position_index(window) })
    }

    pub fn index(&self) -> &[usize] {
        &self.index
    }

    /// `B[h][p][q] = table[index(p, q)][h]`, shaped `N_h × n × n`.
    pub fn bias<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>) -> Result<Var> {
        let n = self.window * self.window;
        let nh = self.num_heads;
        let table = g.param(store, self.table);
        let mut idx = Vec::with_capacity(nh * n * n);
        for h in 0..nh {
            idx.extend(self.index.iter().map(|&row| row * nh + h));
        }
        g.gather(table, idx, &[nh, n, n])
    }
}

/// `softmax(Q·Kᵀ/√d_h + bias)·V` per head. `q`, `k`, `v` are `G×n×d_h`
/// (`G` = heads, or windows × heads); `bias` is `Gb×n×n` with `G % Gb == 0`.
pub fn biased_attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
    g.attention(q, k, v, bias)
}

/// Gather indices taking a `pixels × 3C` fused projection to `q`, `k` and
/// `v` in `(window·heads) × n × d` layout.
fn split_heads_indices(order: &[usize], n: usize, heads: usize, d: usize, part: usize) -> Vec<usize> {
    let c = heads * d;
    let windows = order.len() / n;
    let mut idx = Vec::with_capacity(order.len() * c);
    for w in 0..windows {
        for h in 0..heads {
            for t in 0..n {
                let row = order[w * n + t] * 3 * c + part * c + h * d;
                idx.extend(row..row + d);
            }
        }
    }
    idx
}

/// Inverse of the head split: `(window·heads) × n × d` back to pixel rows.
fn merge_heads_indices(order: &[usize], n: usize, heads: usize, d: usize) -> Vec<usize> {
    let c = heads * d;
    let mut idx = alloc::vec![0; order.len() * c];
    for (t_global, &pixel) in order.iter().enumerate() {
        let (w, t) = (t_global / n, t_global % n);
        for h in 0..heads {
            let src = ((w * heads + h) * n + t) * d;
            for dd in 0..d {
                idx[pixel * c + h * d + dd] = src + dd;
            }
        }
    }
    idx
}

/// Parameters of one pre-norm attention sub-block.
#[derive(Debug, Clone)]
pub struct MhsaParams {
    pub norm_gamma: ParamId,
    pub norm_beta: ParamId,
    pub qkv_w: ParamId,
    pub qkv_b: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    pub config: AttentionConfig,
}

impl MhsaParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, prefix: &str, config: AttentionConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.dim();
        Ok(Self {
            norm_gamma: store.register(&format!("{prefix}.norm1.gamma"), Tensor::full(&[c], T::one()), ParamKind::NoDecay)?,
            norm_beta: store.register(&format!("{prefix}.norm1.beta"), Tensor::zeros(&[c]), ParamKind::NoDecay)?,
            qkv_w: store.register(&format!("{prefix}.attn.qkv.weight"), truncated_normal(rng, &[c, 3 * c], INIT_STD), ParamKind::Weight)?,
            qkv_b: store.register(&format!("{prefix}.attn.qkv.bias"), Tensor::zeros(&[3 * c]), ParamKind::NoDecay)?,
            proj_w: store.register(&format!("{prefix}.attn.proj.weight"), truncated_normal(rng, &[c, c], INIT_STD), ParamKind::Weight)?,
            proj_b: store.register(&format!("{prefix}.attn.proj.bias"), Tensor::zeros(&[c]), ParamKind::NoDecay)?,
            config,
        })
    }
}

/// Pre-norm residual attention: `x + proj(attn(LN(x)·W_qkv))`, attention
/// computed inside the windows of `layout`.
///
/// `x` is `B×H×W×C` (or any shape whose rows are the layout's pixels).
/// `bias` is `N_h×n×n` (shared by all windows) or `(windows·N_h)×n×n`.
pub fn mhsa_block<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    p: &MhsaParams,
    x: Var,
    layout: &WindowLayout,
    bias: Option<Var>,
) -> Result<Var> {
    let cfg = p.config;
    let c = cfg.dim();
    let shape = g.shape(x).to_vec();
    if shape.last() != Some(&c) {
        bail!(Config, "block width {c} ({} heads × {}) does not match input {shape:?}", cfg.num_heads, cfg.head_dim);
    }
    if g.value(x).len() != layout.pixels() * c {
        bail!(Shape, "input {shape:?} does not cover the {}×{}×{} layout", layout.batch, layout.height, layout.width);
    }
    if layout.window != cfg.window {
        bail!(Config, "layout window {} differs from block window {}", layout.window, cfg.window);
    }
    let gamma = g.param(store, p.norm_gamma);
    let beta = g.param(store, p.norm_beta);
    let y = g.layer_norm(x, gamma, beta, T::from_f64_lossy(NORM_EPS))?;
    let qkv_w = g.param(store, p.qkv_w);
    let qkv_b = g.param(store, p.qkv_b);
    let qkv = g.linear(y, qkv_w, Some(qkv_b))?;

    let order = layout.token_order();
    let (n, nh, d) = (layout.tokens(), cfg.num_heads, cfg.head_dim);
    let groups = layout.num_windows() * nh;
    let qkv_shape = [groups, n, d];
    let q = g.gather(qkv, split_heads_indices(&order, n, nh, d, 0), &qkv_shape)?;
    let k = g.gather(qkv, split_heads_indices(&order, n, nh, d, 1), &qkv_shape)?;
    let v = g.gather(qkv, split_heads_indices(&order, n, nh, d, 2), &qkv_shape)?;
    let attn = biased_attention(g, q, k, v, bias)?;
    let merged = g.gather(attn, merge_heads_indices(&order, n, nh, d), &shape)?;
    let proj_w = g.param(store, p.proj_w);
    let proj_b = g.param(store, p.proj_b);
    let out = g.linear(merged, proj_w, Some(proj_b))?;
    g.add(x, out)
}
