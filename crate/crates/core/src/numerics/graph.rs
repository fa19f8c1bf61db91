//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! Every operation appends a node holding its output value and whatever it
//! needs for the backward pass. Nodes only reference earlier nodes, so a
//! single reverse sweep visits parents after children. Reductions run left to
//! right in a fixed order; the same inputs always give the same bits.

#[allow(unused_imports)]
use num_traits::Float as _;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use super::tensor::numel;
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{bail, Error, Result};

static NEXT_GRAPH: AtomicU32 = AtomicU32::new(1);

/// A value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    graph: u32,
    index: usize,
}

/// Geometry of a same-padded stride-1 image convolution in `B×H×W×C` layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
}

#[derive(Debug, Clone)]
struct UpsampleTables<T> {
    batch: usize,
    in_h: usize,
    in_w: usize,
    out_h: usize,
    out_w: usize,
    ch: usize,
    rows: Vec<(usize, usize, T)>,
    cols: Vec<(usize, usize, T)>,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    AddRow(usize, usize),
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Linear { x: usize, w: usize, b: Option<usize>, rows: usize, k: usize, n: usize },
    Softmax { x: usize, cols: usize },
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    Log(usize),
    Exp(usize),
    Sqrt(usize),
    Glu { x: usize, half: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize, cols: usize, stats: Vec<(T, T)> },
    BatchNorm { x: usize, gamma: usize, beta: usize, cols: usize, stats: Vec<(T, T)> },
    Conv2d { x: usize, w: usize, b: Option<usize>, geom: ConvGeom, col: Vec<T> },
    Depthwise { x: usize, w: usize, b: Option<usize>, geom: ConvGeom },
    Upsample { x: usize, tables: UpsampleTables<T> },
    Sum(usize),
    Mean(usize),
    Gather { x: usize, idx: Vec<usize> },
    Concat { parts: Vec<(usize, usize)>, rows: usize },
    Reshape(usize),
    Attention { q: usize, k: usize, v: usize, bias: Option<(usize, usize)>, groups: usize, n: usize, d: usize, scale: T, weights: Vec<T> },
}

#[derive(Debug, Clone)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// The tape. One graph is built per forward pass and dropped after backward.
#[derive(Debug)]
pub struct Graph<T> {
    id: u32,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            bail!(Usage, "value was not recorded on this graph");
        }
        Ok(v.index)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var { graph: self.id, index: self.nodes.len() - 1 }
    }

    fn needs(&self, parents: &[usize]) -> bool {
        parents.iter().any(|&p| self.nodes[p].needs_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[self.idx(v).expect("foreign var")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v).expect("foreign var")].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[self.idx(v).expect("foreign var")];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shapes are valid")
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.value(v)[0]
    }

    // ---------------------------------------------------------------- leaves

    /// Records an input. Gradients are kept for it when `requires_grad` is set.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        if numel(shape) != data.len() {
            bail!(Shape, "constant of shape {shape:?} given {} values", data.len());
        }
        Ok(self.push(shape.to_vec(), data, Op::Leaf, false))
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let e = store.entry(id);
        self.push(e.tensor.shape().to_vec(), e.tensor.data().to_vec(), Op::Param(id), e.trainable())
    }

    /// A copy of `x` that is a leaf of the tape: no gradient flows back
    /// through it.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        let n = &self.nodes[i];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        Ok(self.push(shape, value, Op::Leaf, false))
    }

    // ----------------------------------------------------------- elementwise

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::ShapeMismatch {
                op,
                expected: self.nodes[a].shape.clone(),
                got: self.nodes[b].shape.clone(),
            });
        }
        Ok(())
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: fn(usize, usize) -> Op<T>) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        self.same_shape(name, a, b)?;
        let value = self.nodes[a].value.iter().zip(&self.nodes[b].value).map(|(&x, &y)| f(x, y)).collect();
        let ng = self.needs(&[a, b]);
        Ok(self.push(self.nodes[a].shape.clone(), value, op(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: fn(usize) -> Op<T>) -> Result<Var> {
        let x = self.idx(x)?;
        let value = self.nodes[x].value.iter().map(|&v| f(v)).collect();
        let ng = self.needs(&[x]);
        Ok(self.push(self.nodes[x].shape.clone(), value, op(x), ng))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let i = self.idx(x)?;
        let value = self.nodes[i].value.iter().map(|&v| v * s).collect();
        let ng = self.needs(&[i]);
        Ok(self.push(self.nodes[i].shape.clone(), value, Op::Scale(i, s), ng))
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        self.unary(x, |v| v + s, Op::AddScalar)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, sigmoid, Op::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(
            x,
            |v| {
                let t = (c::<T>(GELU_K) * (v + c::<T>(GELU_A) * v * v * v)).tanh();
                c::<T>(0.5) * v * (T::one() + t)
            },
            Op::Gelu,
        )
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        if self.nodes[i].value.iter().any(|&v| v <= T::zero()) {
            bail!(Numerical, "log of a non-positive value");
        }
        self.unary(x, |v| v.ln(), Op::Log)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, |v| v.exp(), Op::Exp)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let i = self.idx(x)?;
        if self.nodes[i].value.iter().any(|&v| v < T::zero()) {
            bail!(Numerical, "sqrt of a negative value");
        }
        self.unary(x, |v| v.sqrt(), Op::Sqrt)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.mul(x, x)
    }

    /// `x + b` with `b` broadcast along every row of the last dimension.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xi, bi) = (self.idx(x)?, self.idx(b)?);
        let cols = *self.nodes[xi].shape.last().unwrap_or(&0);
        if self.nodes[bi].value.len() != cols {
            bail!(Shape, "row bias of length {} for rows of {cols}", self.nodes[bi].value.len());
        }
        let bv = &self.nodes[bi].value;
        let value = self.nodes[xi].value.chunks(cols).flat_map(|r| r.iter().zip(bv).map(|(&a, &b)| a + b)).collect();
        let ng = self.needs(&[xi, bi]);
        Ok(self.push(self.nodes[xi].shape.clone(), value, Op::AddRow(xi, bi), ng))
    }

    // ---------------------------------------------------------------- linear

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (&self.nodes[ai].shape, &self.nodes[bi].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Shape, "matmul of {sa:?} and {sb:?}");
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, &self.nodes[ai].value, (k, 1), &self.nodes[bi].value, (n, 1), &mut out, false);
        let ng = self.needs(&[ai, bi]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a: ai, b: bi, m, k, n }, ng))
    }

    /// `x·W + b` applied to the last dimension of `x`; `W` is `k×n`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let ws = &self.nodes[wi].shape;
        let xs = &self.nodes[xi].shape;
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            bail!(Shape, "linear of {xs:?} with weight {ws:?}");
        }
        let (k, n) = (ws[0], ws[1]);
        let rows = self.nodes[xi].value.len() / k;
        let mut out = vec![T::zero(); rows * n];
        if let Some(bi) = bi {
            if self.nodes[bi].value.len() != n {
                bail!(Shape, "linear bias of length {} for width {n}", self.nodes[bi].value.len());
            }
            for r in out.chunks_mut(n) {
                r.copy_from_slice(&self.nodes[bi].value);
            }
        }
        T::gemm(rows, k, n, &self.nodes[xi].value, (k, 1), &self.nodes[wi].value, (n, 1), &mut out, bi.is_some());
        let mut shape = xs.clone();
        *shape.last_mut().expect("rank ≥ 1") = n;
        let mut parents = vec![xi, wi];
        parents.extend(bi);
        let ng = self.needs(&parents);
        Ok(self.push(shape, out, Op::Linear { x: xi, w: wi, b: bi, rows, k, n }, ng))
    }

    // ----------------------------------------------------------- activations

    /// Softmax over the last dimension of a rank-2 tensor, max-subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = &self.nodes[xi].shape;
        if s.len() != 2 {
            bail!(Shape, "softmax_rows expects a rank-2 tensor, got {s:?}");
        }
        let cols = s[1];
        let mut out = self.nodes[xi].value.clone();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let ng = self.needs(&[xi]);
        Ok(self.push(s.clone(), out, Op::Softmax { x: xi, cols }, ng))
    }

    /// Gated linear unit over the last dimension: `a ⊙ σ(b)` for `[a | b]`.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].shape.clone();
        let w = *s.last().unwrap_or(&0);
        if w % 2 != 0 {
            bail!(Shape, "glu needs an even last dimension, got {w}");
        }
        let half = w / 2;
        let out = self.nodes[xi]
            .value
            .chunks(w)
            .flat_map(|r| (0..half).map(move |j| r[j] * sigmoid(r[half + j])))
            .collect();
        let mut shape = s;
        *shape.last_mut().expect("rank ≥ 1") = half;
        let ng = self.needs(&[xi]);
        Ok(self.push(shape, out, Op::Glu { x: xi, half }, ng))
    }

    // --------------------------------------------------------- normalization

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let cols = *self.nodes[xi].shape.last().unwrap_or(&0);
        if self.nodes[gi].value.len() != cols || self.nodes[bi].value.len() != cols {
            bail!(Shape, "layer_norm affine parameters do not match width {cols}");
        }
        let inv_n = T::one() / c::<T>(cols as f64);
        let (g, b) = (&self.nodes[gi].value, &self.nodes[bi].value);
        let mut out = Vec::with_capacity(self.nodes[xi].value.len());
        let mut stats = Vec::new();
        for row in self.nodes[xi].value.chunks(cols) {
            let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_n;
            let var = row.iter().fold(T::zero(), |a, &v| a + (v - mean) * (v - mean)) * inv_n;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(row.iter().enumerate().map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]));
            stats.push((mean, rstd));
        }
        let ng = self.needs(&[xi, gi, bi]);
        Ok(self.push(self.nodes[xi].shape.clone(), out, Op::LayerNorm { x: xi, gamma: gi, beta: bi, cols, stats }, ng))
    }

    /// Batch normalization with batch statistics over every row; the last
    /// dimension is the channel. Also returns the batch mean and unbiased
    /// variance for the caller's running averages.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let cols = *self.nodes[xi].shape.last().unwrap_or(&0);
        if self.nodes[gi].value.len() != cols || self.nodes[bi].value.len() != cols {
            bail!(Shape, "batch_norm affine parameters do not match width {cols}");
        }
        let xv = &self.nodes[xi].value;
        let rows = xv.len() / cols;
        let inv_n = T::one() / c::<T>(rows as f64);
        let mut mean = vec![T::zero(); cols];
        for r in xv.chunks(cols) {
            mean.iter_mut().zip(r).for_each(|(m, &v)| *m = *m + v);
        }
        mean.iter_mut().for_each(|m| *m = *m * inv_n);
        let mut var = vec![T::zero(); cols];
        for r in xv.chunks(cols) {
            for j in 0..cols {
                let d = r[j] - mean[j];
                var[j] = var[j] + d * d;
            }
        }
        let unbiased: Vec<T> = var
            .iter()
            .map(|&s| if rows > 1 { s / c::<T>((rows - 1) as f64) } else { T::zero() })
            .collect();
        let stats: Vec<(T, T)> = var.iter().zip(&mean).map(|(&s, &m)| (m, T::one() / (s * inv_n + eps).sqrt())).collect();
        let (g, b) = (&self.nodes[gi].value, &self.nodes[bi].value);
        let out = xv
            .chunks(cols)
            .flat_map(|r| r.iter().enumerate().map(|(j, &v)| (v - stats[j].0) * stats[j].1 * g[j] + b[j]).collect::<Vec<_>>())
            .collect();
        let ng = self.needs(&[xi, gi, bi]);
        let v = self.push(self.nodes[xi].shape.clone(), out, Op::BatchNorm { x: xi, gamma: gi, beta: bi, cols, stats }, ng);
        Ok((v, mean, unbiased))
    }

    /// Batch normalization with fixed statistics (evaluation mode).
    pub fn batch_norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: T) -> Result<Var> {
        let cols = *self.shape(x).last().unwrap_or(&0);
        if mean.len() != cols || var.len() != cols {
            bail!(Shape, "running statistics do not match width {cols}");
        }
        // (x - m)·rstd·γ + β  ==  x·(rstd·γ) + (β - m·rstd·γ), recorded as
        // primitive ops so gradients reach γ and β.
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let shift = self.constant(&[cols], mean.iter().map(|&m| -m).collect())?;
        let centered = self.add_row(x, shift)?;
        let rs = self.constant(&[cols], rstd)?;
        let scaled = self.mul_row(centered, rs)?;
        let g = self.mul_row(scaled, gamma)?;
        self.add_row(g, beta)
    }

    /// `x ⊙ s` with `s` broadcast along rows of the last dimension.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let (xi, si) = (self.idx(x)?, self.idx(s)?);
        let cols = *self.nodes[xi].shape.last().unwrap_or(&0);
        if self.nodes[si].value.len() != cols {
            bail!(Shape, "row scale of length {} for rows of {cols}", self.nodes[si].value.len());
        }
        let rows = self.nodes[xi].value.len() / cols;
        // Expressed as a gather of `s` to full size followed by `mul`, which
        // keeps the backward rules in one place.
        let idx: Vec<usize> = (0..rows).flat_map(|_| 0..cols).collect();
        let shape = self.nodes[xi].shape.clone();
        let tiled = self.gather(s, idx, &shape)?;
        self.mul(x, tiled)
    }

    // ----------------------------------------------------------- convolution

    fn check_image(&self, xi: usize, what: &str) -> Result<(usize, usize, usize, usize)> {
        let s = &self.nodes[xi].shape;
        if s.len() != 4 {
            bail!(Shape, "{what} expects B×H×W×C input, got {s:?}");
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    /// Same-padded stride-1 convolution. `w` is `(k·k·Cin)×Cout` laid out
    /// as `[ky][kx][cin]` rows.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, kernel: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let (batch, height, width, in_ch) = self.check_image(xi, "conv2d")?;
        if kernel % 2 == 0 {
            bail!(Shape, "conv2d kernel must be odd, got {kernel}");
        }
        let ws = &self.nodes[wi].shape;
        if ws.len() != 2 || ws[0] != kernel * kernel * in_ch {
            bail!(Shape, "conv2d weight {ws:?} for {kernel}×{kernel}×{in_ch}");
        }
        let out_ch = ws[1];
        let geom = ConvGeom { batch, height, width, in_ch, out_ch, kernel };
        let col = im2col(&self.nodes[xi].value, &geom);
        let rows = batch * height * width;
        let kk = kernel * kernel * in_ch;
        let mut out = vec![T::zero(); rows * out_ch];
        if let Some(bi) = bi {
            if self.nodes[bi].value.len() != out_ch {
                bail!(Shape, "conv2d bias length {} for {out_ch} channels", self.nodes[bi].value.len());
            }
            for r in out.chunks_mut(out_ch) {
                r.copy_from_slice(&self.nodes[bi].value);
            }
        }
        T::gemm(rows, kk, out_ch, &col, (kk, 1), &self.nodes[wi].value, (out_ch, 1), &mut out, bi.is_some());
        let mut parents = vec![xi, wi];
        parents.extend(bi);
        let ng = self.needs(&parents);
        Ok(self.push(vec![batch, height, width, out_ch], out, Op::Conv2d { x: xi, w: wi, b: bi, geom, col }, ng))
    }

    /// Same-padded depthwise convolution; `w` is `(k·k)×C`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, kernel: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let (batch, height, width, ch) = self.check_image(xi, "depthwise_conv2d")?;
        if kernel % 2 == 0 || self.nodes[wi].shape != [kernel * kernel, ch] {
            bail!(Shape, "depthwise weight {:?} for kernel {kernel} and {ch} channels", self.nodes[wi].shape);
        }
        let geom = ConvGeom { batch, height, width, in_ch: ch, out_ch: ch, kernel };
        let xv = &self.nodes[xi].value;
        let wv = &self.nodes[wi].value;
        let mut out = vec![T::zero(); xv.len()];
        if let Some(bi) = bi {
            for r in out.chunks_mut(ch) {
                r.copy_from_slice(&self.nodes[bi].value);
            }
        }
        for_each_tap(&geom, |o, i, t| {
            let (orow, irow, wrow) = (&mut out[o * ch..(o + 1) * ch], &xv[i * ch..(i + 1) * ch], &wv[t * ch..(t + 1) * ch]);
            for j in 0..ch {
                orow[j] = orow[j] + irow[j] * wrow[j];
            }
        });
        let mut parents = vec![xi, wi];
        parents.extend(bi);
        let ng = self.needs(&parents);
        Ok(self.push(self.nodes[xi].shape.clone(), out, Op::Depthwise { x: xi, w: wi, b: bi, geom }, ng))
    }

    /// Bilinear resize of a `B×H×W×C` tensor with aligned corners.
    pub fn upsample_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (batch, in_h, in_w, ch) = self.check_image(xi, "upsample_bilinear")?;
        if out_h == 0 || out_w == 0 {
            bail!(Shape, "empty resize target");
        }
        let tables = UpsampleTables { batch, in_h, in_w, out_h, out_w, ch, rows: interp_table(in_h, out_h), cols: interp_table(in_w, out_w) };
        let xv = &self.nodes[xi].value;
        let mut out = vec![T::zero(); batch * out_h * out_w * ch];
        tables.visit(|o, i, wgt| {
            for j in 0..ch {
                out[o * ch + j] = out[o * ch + j] + xv[i * ch + j] * wgt;
            }
        });
        let ng = self.needs(&[xi]);
        Ok(self.push(vec![batch, out_h, out_w, ch], out, Op::Upsample { x: xi, tables }, ng))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.iter().fold(T::zero(), |a, &v| a + v);
        let ng = self.needs(&[xi]);
        Ok(self.push(vec![1], vec![s], Op::Sum(xi), ng))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = self.nodes[xi].value.len();
        let s = self.nodes[xi].value.iter().fold(T::zero(), |a, &v| a + v) / c::<T>(n as f64);
        let ng = self.needs(&[xi]);
        Ok(self.push(vec![1], vec![s], Op::Mean(xi), ng))
    }

    // ---------------------------------------------------------- index shuffles

    /// `out[i] = x[idx[i]]` (flat indices); the backward pass scatter-adds.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let len = self.nodes[xi].value.len();
        if numel(shape) != idx.len() {
            bail!(Shape, "gather of {} indices into shape {shape:?}", idx.len());
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= len) {
            bail!(Usage, "gather index {bad} out of range for {len} values");
        }
        let xv = &self.nodes[xi].value;
        let out = idx.iter().map(|&i| xv[i]).collect();
        let ng = self.needs(&[xi]);
        Ok(self.push(shape.to_vec(), out, Op::Gather { x: xi, idx }, ng))
    }

    /// Selects the entries whose mask bit is set, as a rank-1 tensor.
    pub fn masked_select(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let len = self.value(x).len();
        if mask.len() != len {
            bail!(Shape, "mask of length {} for {len} values", mask.len());
        }
        let idx: Vec<usize> = mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect();
        if idx.is_empty() {
            bail!(Usage, "masked_select with an empty mask");
        }
        let n = idx.len();
        self.gather(x, idx, &[n])
    }

    /// Swaps the two dimensions of a rank-2 tensor.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            bail!(Shape, "transpose expects rank 2, got {s:?}");
        }
        let (r, cn) = (s[0], s[1]);
        let idx = (0..cn).flat_map(|j| (0..r).map(move |i| i * cn + j)).collect();
        self.gather(x, idx, &[cn, r])
    }

    /// Concatenates along the last dimension; leading dimensions must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            bail!(Usage, "concat of nothing");
        }
        let ids: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let lead = &self.nodes[ids[0]].shape[..self.nodes[ids[0]].shape.len() - 1];
        for &i in &ids {
            let s = &self.nodes[i].shape;
            if &s[..s.len() - 1] != lead {
                bail!(Shape, "concat of {:?} with {s:?}", self.nodes[ids[0]].shape);
            }
        }
        let rows = numel(lead);
        let widths: Vec<(usize, usize)> = ids.iter().map(|&i| (i, *self.nodes[i].shape.last().unwrap())).collect();
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(i, w) in &widths {
                out.extend_from_slice(&self.nodes[i].value[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let ng = self.needs(&ids);
        Ok(self.push(shape, out, Op::Concat { parts: widths, rows }, ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        if numel(shape) != self.nodes[xi].value.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch { op: "reshape", expected: self.nodes[xi].shape.clone(), got: shape.to_vec() });
        }
        let value = self.nodes[xi].value.clone();
        let ng = self.needs(&[xi]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(xi), ng))
    }

    // -------------------------------------------------------------- attention

    /// Grouped scaled dot-product attention with an additive logit bias.
    ///
    /// `q`, `k`, `v` are `G×n×d`. `bias`, when given, is `Gb×n×n` with
    /// `G % Gb == 0`; group `g` adds bias slice `g % Gb`. Per group:
    /// `softmax(q·kᵀ/√d + bias)·v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, bias: Option<Var>) -> Result<Var> {
        let (qi, ki, vi) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let s = self.nodes[qi].shape.clone();
        if s.len() != 3 || self.nodes[ki].shape != s || self.nodes[vi].shape != s {
            bail!(Shape, "attention needs equal G×n×d q, k, v; got {:?}, {:?}, {:?}", s, self.nodes[ki].shape, self.nodes[vi].shape);
        }
        let (groups, n, d) = (s[0], s[1], s[2]);
        let bias = match bias {
            None => None,
            Some(b) => {
                let bi = self.idx(b)?;
                let bs = &self.nodes[bi].shape;
                if bs.len() != 3 || bs[1] != n || bs[2] != n || groups % bs[0] != 0 {
                    bail!(Shape, "attention bias {bs:?} for {groups} groups of {n} tokens");
                }
                if self.nodes[bi].value.iter().any(|v| !v.is_finite()) {
                    bail!(Numerical, "non-finite attention bias");
                }
                Some((bi, bs[0]))
            }
        };
        let scale = T::one() / c::<T>(d as f64).sqrt();
        let mut weights = vec![T::zero(); groups * n * n];
        let mut out = vec![T::zero(); groups * n * d];
        let (qv, kv, vv) = (&self.nodes[qi].value, &self.nodes[ki].value, &self.nodes[vi].value);
        for g in 0..groups {
            let sl = g * n * d..(g + 1) * n * d;
            let a = &mut weights[g * n * n..(g + 1) * n * n];
            T::gemm(n, d, n, &qv[sl.clone()], (d, 1), &kv[sl.clone()], (1, d), a, false);
            match bias {
                Some((bi, gb)) => {
                    let bs = &self.nodes[bi].value[(g % gb) * n * n..(g % gb + 1) * n * n];
                    a.iter_mut().zip(bs).for_each(|(x, &b)| *x = *x * scale + b);
                }
                None => a.iter_mut().for_each(|x| *x = *x * scale),
            }
            for row in a.chunks_mut(n) {
                softmax_in_place(row);
            }
            T::gemm(n, n, d, a, (n, 1), &vv[sl.clone()], (d, 1), &mut out[sl], false);
        }
        let mut parents = vec![qi, ki, vi];
        parents.extend(bias.map(|b| b.0));
        let ng = self.needs(&parents);
        Ok(self.push(s, out, Op::Attention { q: qi, k: ki, v: vi, bias, groups, n, d, scale, weights }, ng))
    }

    /// Row-stochastic attention weights recorded by an [`Graph::attention`]
    /// node, `G×n×n`.
    pub fn attention_weights(&self, out: Var) -> Option<&[T]> {
        match &self.nodes[self.idx(out).ok()?].op {
            Op::Attention { weights, .. } => Some(weights),
            _ => None,
        }
    }

    // --------------------------------------------------------------- backward

    /// Reverse sweep from a scalar `loss`. Returns gradients for every node
    /// that depends on a trainable parameter or a gradient-requiring input.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            bail!(Usage, "backward from a non-scalar of shape {:?}", self.nodes[li].shape);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![T::one()]);
        for i in (0..=li).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if !n.needs_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { graph: self.id, grads })
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |p: usize| nodes[p].needs_grad;
        macro_rules! buf {
            ($p:expr) => {{
                let p = $p;
                let len = nodes[p].value.len();
                grads[p].get_or_insert_with(|| vec![T::zero(); len])
            }};
        }
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                for (p, sign) in [(*a, T::one()), (*b, T::one())] {
                    if wants(p) {
                        buf!(p).iter_mut().zip(g).for_each(|(x, &y)| *x = *x + sign * y);
                    }
                }
            }
            Op::Sub(a, b) => {
                for (p, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if wants(p) {
                        buf!(p).iter_mut().zip(g).for_each(|(x, &y)| *x = *x + sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                if wants(a) {
                    let other = &nodes[b].value;
                    buf!(a).iter_mut().zip(g).zip(other).for_each(|((x, &y), &o)| *x = *x + y * o);
                }
                if wants(b) {
                    let other = &nodes[a].value;
                    buf!(b).iter_mut().zip(g).zip(other).for_each(|((x, &y), &o)| *x = *x + y * o);
                }
            }
            Op::Scale(x, s) => {
                if wants(*x) {
                    buf!(*x).iter_mut().zip(g).for_each(|(a, &y)| *a = *a + y * *s);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if wants(*x) {
                    buf!(*x).iter_mut().zip(g).for_each(|(a, &y)| *a = *a + y);
                }
            }
            Op::AddRow(x, b) => {
                let cols = nodes[*b].value.len();
                if wants(*x) {
                    buf!(*x).iter_mut().zip(g).for_each(|(a, &y)| *a = *a + y);
                }
                if wants(*b) {
                    let gb = buf!(*b);
                    for r in g.chunks(cols) {
                        gb.iter_mut().zip(r).for_each(|(a, &y)| *a = *a + y);
                    }
                }
            }
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                if wants(a) {
                    let bv = &nodes[b].value;
                    T::gemm(m, n, k, g, (n, 1), bv, (1, n), buf!(a), true);
                }
                if wants(b) {
                    let av = &nodes[a].value;
                    T::gemm(k, m, n, av, (1, k), g, (n, 1), buf!(b), true);
                }
            }
            Op::Linear { x, w, b, rows, k, n } => {
                let (x, w, rows, k, n) = (*x, *w, *rows, *k, *n);
                if wants(x) {
                    let wv = &nodes[w].value;
                    T::gemm(rows, n, k, g, (n, 1), wv, (1, n), buf!(x), true);
                }
                if wants(w) {
                    let xv = &nodes[x].value;
                    T::gemm(k, rows, n, xv, (1, k), g, (n, 1), buf!(w), true);
                }
                if let Some(b) = *b {
                    if wants(b) {
                        let gb = buf!(b);
                        for r in g.chunks(n) {
                            gb.iter_mut().zip(r).for_each(|(a, &y)| *a = *a + y);
                        }
                    }
                }
            }
            Op::Softmax { x, cols } => {
                if wants(*x) {
                    let y = &node.value;
                    let gx = buf!(*x);
                    for ((gr, yr), xr) in g.chunks(*cols).zip(y.chunks(*cols)).zip(gx.chunks_mut(*cols)) {
                        let dot = gr.iter().zip(yr).fold(T::zero(), |a, (&gg, &yy)| a + gg * yy);
                        for j in 0..*cols {
                            xr[j] = xr[j] + yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if wants(*x) {
                    let y = &node.value;
                    buf!(*x).iter_mut().zip(g).zip(y).for_each(|((a, &gg), &yy)| *a = *a + gg * yy * (T::one() - yy));
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let xv = &nodes[*x].value;
                    buf!(*x).iter_mut().zip(g).zip(xv).for_each(|((a, &gg), &v)| {
                        if v > T::zero() {
                            *a = *a + gg
                        }
                    });
                }
            }
            Op::Gelu(x) => {
                if wants(*x) {
                    let xv = &nodes[*x].value;
                    let (k, a3) = (c::<T>(GELU_K), c::<T>(GELU_A));
                    let half = c::<T>(0.5);
                    buf!(*x).iter_mut().zip(g).zip(xv).for_each(|((a, &gg), &v)| {
                        let t = (k * (v + a3 * v * v * v)).tanh();
                        let d = half * (T::one() + t) + half * v * (T::one() - t * t) * k * (T::one() + c::<T>(3.0) * a3 * v * v);
                        *a = *a + gg * d;
                    });
                }
            }
            Op::Log(x) => {
                if wants(*x) {
                    let xv = &nodes[*x].value;
                    buf!(*x).iter_mut().zip(g).zip(xv).for_each(|((a, &gg), &v)| *a = *a + gg / v);
                }
            }
            Op::Exp(x) => {
                if wants(*x) {
                    let y = &node.value;
                    buf!(*x).iter_mut().zip(g).zip(y).for_each(|((a, &gg), &yy)| *a = *a + gg * yy);
                }
            }
            Op::Sqrt(x) => {
                if wants(*x) {
                    let y = &node.value;
                    let half = c::<T>(0.5);
                    buf!(*x).iter_mut().zip(g).zip(y).for_each(|((a, &gg), &yy)| {
                        if yy > T::zero() {
                            *a = *a + gg * half / yy
                        }
                    });
                }
            }
            Op::Glu { x, half } => {
                if wants(*x) {
                    let half = *half;
                    let xv = &nodes[*x].value;
                    let gx = buf!(*x);
                    for ((gr, xr), gxr) in g.chunks(half).zip(xv.chunks(2 * half)).zip(gx.chunks_mut(2 * half)) {
                        for j in 0..half {
                            let s = sigmoid(xr[half + j]);
                            gxr[j] = gxr[j] + gr[j] * s;
                            gxr[half + j] = gxr[half + j] + gr[j] * xr[j] * s * (T::one() - s);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, cols, stats } => {
                let cols = *cols;
                let xv = &nodes[*x].value;
                let gv = &nodes[*gamma].value;
                let inv_n = T::one() / c::<T>(cols as f64);
                if wants(*gamma) || wants(*beta) {
                    let mut dg = vec![T::zero(); cols];
                    let mut db = vec![T::zero(); cols];
                    for ((gr, xr), &(m, r)) in g.chunks(cols).zip(xv.chunks(cols)).zip(stats) {
                        for j in 0..cols {
                            dg[j] = dg[j] + gr[j] * (xr[j] - m) * r;
                            db[j] = db[j] + gr[j];
                        }
                    }
                    if wants(*gamma) {
                        buf!(*gamma).iter_mut().zip(&dg).for_each(|(a, &d)| *a = *a + d);
                    }
                    if wants(*beta) {
                        buf!(*beta).iter_mut().zip(&db).for_each(|(a, &d)| *a = *a + d);
                    }
                }
                if wants(*x) {
                    let gx = buf!(*x);
                    let mut dxh = vec![T::zero(); cols];
                    for (((gr, xr), &(m, r)), gxr) in g.chunks(cols).zip(xv.chunks(cols)).zip(stats).zip(gx.chunks_mut(cols)) {
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..cols {
                            dxh[j] = gr[j] * gv[j];
                            s1 = s1 + dxh[j];
                            s2 = s2 + dxh[j] * (xr[j] - m) * r;
                        }
                        let (s1, s2) = (s1 * inv_n, s2 * inv_n);
                        for j in 0..cols {
                            let xh = (xr[j] - m) * r;
                            gxr[j] = gxr[j] + r * (dxh[j] - s1 - xh * s2);
                        }
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, cols, stats } => {
                let cols = *cols;
                let xv = &nodes[*x].value;
                let gv = &nodes[*gamma].value;
                let rows = xv.len() / cols;
                let inv_n = T::one() / c::<T>(rows as f64);
                let mut dg = vec![T::zero(); cols];
                let mut db = vec![T::zero(); cols];
                for (gr, xr) in g.chunks(cols).zip(xv.chunks(cols)) {
                    for j in 0..cols {
                        dg[j] = dg[j] + gr[j] * (xr[j] - stats[j].0) * stats[j].1;
                        db[j] = db[j] + gr[j];
                    }
                }
                if wants(*x) {
                    let gx = buf!(*x);
                    for ((gr, xr), gxr) in g.chunks(cols).zip(xv.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        for j in 0..cols {
                            let (m, r) = stats[j];
                            let xh = (xr[j] - m) * r;
                            // Σ dx̂ = γ·Σg and Σ dx̂·x̂ = γ·Σ g·x̂
                            let dxh = gr[j] * gv[j];
                            gxr[j] = gxr[j] + r * (dxh - gv[j] * db[j] * inv_n - xh * gv[j] * dg[j] * inv_n);
                        }
                    }
                }
                if wants(*gamma) {
                    buf!(*gamma).iter_mut().zip(&dg).for_each(|(a, &d)| *a = *a + d);
                }
                if wants(*beta) {
                    buf!(*beta).iter_mut().zip(&db).for_each(|(a, &d)| *a = *a + d);
                }
            }
            Op::Conv2d { x, w, b, geom, col } => {
                let rows = geom.batch * geom.height * geom.width;
                let kk = geom.kernel * geom.kernel * geom.in_ch;
                let oc = geom.out_ch;
                if wants(*w) {
                    T::gemm(kk, rows, oc, col, (1, kk), g, (oc, 1), buf!(*w), true);
                }
                if let Some(b) = *b {
                    if wants(b) {
                        let gb = buf!(b);
                        for r in g.chunks(oc) {
                            gb.iter_mut().zip(r).for_each(|(a, &y)| *a = *a + y);
                        }
                    }
                }
                if wants(*x) {
                    let wv = &nodes[*w].value;
                    let mut dcol = vec![T::zero(); rows * kk];
                    T::gemm(rows, oc, kk, g, (oc, 1), wv, (1, oc), &mut dcol, false);
                    col2im_add(&dcol, geom, buf!(*x));
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let ch = geom.in_ch;
                if let Some(b) = *b {
                    if wants(b) {
                        let gb = buf!(b);
                        for r in g.chunks(ch) {
                            gb.iter_mut().zip(r).for_each(|(a, &y)| *a = *a + y);
                        }
                    }
                }
                if wants(*w) {
                    let xv = &nodes[*x].value;
                    let gw = buf!(*w);
                    for_each_tap(geom, |o, i, t| {
                        for j in 0..ch {
                            gw[t * ch + j] = gw[t * ch + j] + g[o * ch + j] * xv[i * ch + j];
                        }
                    });
                }
                if wants(*x) {
                    let wv = &nodes[*w].value;
                    let gx = buf!(*x);
                    for_each_tap(geom, |o, i, t| {
                        for j in 0..ch {
                            gx[i * ch + j] = gx[i * ch + j] + g[o * ch + j] * wv[t * ch + j];
                        }
                    });
                }
            }
            Op::Upsample { x, tables } => {
                if wants(*x) {
                    let ch = tables.ch;
                    let gx = buf!(*x);
                    tables.visit(|o, i, wgt| {
                        for j in 0..ch {
                            gx[i * ch + j] = gx[i * ch + j] + g[o * ch + j] * wgt;
                        }
                    });
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    buf!(*x).iter_mut().for_each(|a| *a = *a + g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let n = c::<T>(nodes[*x].value.len() as f64);
                    buf!(*x).iter_mut().for_each(|a| *a = *a + g[0] / n);
                }
            }
            Op::Gather { x, idx } => {
                if wants(*x) {
                    let gx = buf!(*x);
                    for (&j, &gg) in idx.iter().zip(g) {
                        gx[j] = gx[j] + gg;
                    }
                }
            }
            Op::Concat { parts, rows } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let mut off = 0;
                for &(p, w) in parts {
                    if wants(p) {
                        let gp = buf!(p);
                        for r in 0..*rows {
                            let src = &g[r * total + off..r * total + off + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(a, &y)| *a = *a + y);
                        }
                    }
                    off += w;
                }
            }
            Op::Attention { q, k, v, bias, groups, n, d, scale, weights } => {
                let (n, d, scale) = (*n, *d, *scale);
                let (qv, kv, vv) = (&nodes[*q].value, &nodes[*k].value, &nodes[*v].value);
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut dbias = bias.map(|(bi, _)| vec![T::zero(); nodes[bi].value.len()]);
                let mut da = vec![T::zero(); n * n];
                for gi in 0..*groups {
                    let sl = gi * n * d..(gi + 1) * n * d;
                    let a = &weights[gi * n * n..(gi + 1) * n * n];
                    let go = &g[sl.clone()];
                    // dV = Aᵀ·dO
                    T::gemm(n, n, d, a, (1, n), go, (d, 1), &mut dv[sl.clone()], false);
                    // dA = dO·Vᵀ, then softmax backward into dS (in place)
                    T::gemm(n, d, n, go, (d, 1), &vv[sl.clone()], (1, d), &mut da, false);
                    for (dr, ar) in da.chunks_mut(n).zip(a.chunks(n)) {
                        let dot = dr.iter().zip(ar).fold(T::zero(), |s, (&x, &y)| s + x * y);
                        for j in 0..n {
                            dr[j] = ar[j] * (dr[j] - dot);
                        }
                    }
                    if let (Some(db), Some((_, gb))) = (dbias.as_mut(), bias) {
                        let off = (gi % gb) * n * n;
                        db[off..off + n * n].iter_mut().zip(&da).for_each(|(x, &y)| *x = *x + y);
                    }
                    for x in da.iter_mut() {
                        *x = *x * scale;
                    }
                    T::gemm(n, n, d, &da, (n, 1), &kv[sl.clone()], (d, 1), &mut dq[sl.clone()], false);
                    T::gemm(n, n, d, &da, (1, n), &qv[sl.clone()], (d, 1), &mut dk[sl.clone()], false);
                }
                for (p, gp) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(p) {
                        buf!(p).iter_mut().zip(&gp).for_each(|(a, &y)| *a = *a + y);
                    }
                }
                if let (Some((bi, _)), Some(db)) = (bias, dbias) {
                    if wants(*bi) {
                        buf!(*bi).iter_mut().zip(&db).for_each(|(a, &y)| *a = *a + y);
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    graph: u32,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient with respect to a recorded value; `None` when no gradient
    /// reaches it.
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        if v.graph != self.graph {
            return None;
        }
        self.grads.get(v.index)?.as_deref()
    }

    /// Adds the gradient of every parameter node into the store's gradient
    /// slots. Parameters recorded more than once receive the sum.
    pub fn accumulate_into(&self, graph: &Graph<T>, store: &mut ParamStore<T>) -> Result<()> {
        if graph.id != self.graph {
            bail!(Usage, "gradients belong to a different graph");
        }
        for (node, g) in graph.nodes.iter().zip(&self.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                if store.entry(*id).trainable() {
                    store.get_mut(*id).accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Calls `f(out_pixel, in_pixel, tap)` for every in-bounds kernel tap of a
/// same-padded convolution; pixels are flat `(b, y, x)` indices.
fn for_each_tap(geom: &ConvGeom, mut f: impl FnMut(usize, usize, usize)) {
    let (h, w, k) = (geom.height as isize, geom.width as isize, geom.kernel as isize);
    let pad = k / 2;
    for b in 0..geom.batch as isize {
        for y in 0..h {
            for x in 0..w {
                let o = ((b * h + y) * w + x) as usize;
                for ky in 0..k {
                    let iy = y + ky - pad;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = x + kx - pad;
                        if ix < 0 || ix >= w {
                            continue;
                        }
                        f(o, ((b * h + iy) * w + ix) as usize, (ky * k + kx) as usize);
                    }
                }
            }
        }
    }
}

fn im2col<T: Scalar>(x: &[T], geom: &ConvGeom) -> Vec<T> {
    let ci = geom.in_ch;
    let kk = geom.kernel * geom.kernel * ci;
    let mut col = vec![T::zero(); geom.batch * geom.height * geom.width * kk];
    for_each_tap(geom, |o, i, t| {
        col[o * kk + t * ci..o * kk + (t + 1) * ci].copy_from_slice(&x[i * ci..(i + 1) * ci]);
    });
    col
}

fn col2im_add<T: Scalar>(dcol: &[T], geom: &ConvGeom, gx: &mut [T]) {
    let ci = geom.in_ch;
    let kk = geom.kernel * geom.kernel * ci;
    for_each_tap(geom, |o, i, t| {
        let src = &dcol[o * kk + t * ci..o * kk + (t + 1) * ci];
        gx[i * ci..(i + 1) * ci].iter_mut().zip(src).for_each(|(a, &v)| *a = *a + v);
    });
}

fn interp_table<T: Scalar>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    (0..output)
        .map(|o| {
            if input == 1 || output == 1 {
                return (0, 0, T::zero());
            }
            let pos = o as f64 * (input - 1) as f64 / (output - 1) as f64;
            let lo = (pos.floor() as usize).min(input - 1);
            let hi = (lo + 1).min(input - 1);
            (lo, hi, c::<T>(pos - lo as f64))
        })
        .collect()
}

impl<T: Scalar> UpsampleTables<T> {
    /// Calls `f(out_pixel, in_pixel, weight)` for the four bilinear taps.
    fn visit(&self, mut f: impl FnMut(usize, usize, T)) {
        for b in 0..self.batch {
            for (oy, &(y0, y1, wy)) in self.rows.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in self.cols.iter().enumerate() {
                    let o = (b * self.out_h + oy) * self.out_w + ox;
                    let base = b * self.in_h;
                    let one = T::one();
                    f(o, (base + y0) * self.in_w + x0, (one - wy) * (one - wx));
                    f(o, (base + y0) * self.in_w + x1, (one - wy) * wx);
                    f(o, (base + y1) * self.in_w + x0, wy * (one - wx));
                    f(o, (base + y1) * self.in_w + x1, wy * wx);
                }
            }
        }
    }
}
