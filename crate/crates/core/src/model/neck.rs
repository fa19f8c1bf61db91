//! Parallel multi-scale neck: one convolutional block per pyramid level,
//! all brought to 1/4 scale and fused in a single projection.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{BatchNorm, BnMode, BnUpdate, Conv2d, LayerNorm, Linear};
use crate::error::{bail, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Var};

#[derive(Debug, Clone)]
pub struct Cnb {
    pub conv1: Conv2d,
    pub bn1: BatchNorm,
    pub conv2: Conv2d,
    pub bn2: BatchNorm,
}

impl Cnb {
    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, name: &str, in_ch: usize, out_ch: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::register(store, &format!("{name}.conv1"), in_ch, out_ch, 3, false, rng)?,
            bn1: BatchNorm::register(store, &format!("{name}.bn1"), out_ch)?,
            conv2: Conv2d::register(store, &format!("{name}.conv2"), out_ch, out_ch, 3, false, rng)?,
            bn2: BatchNorm::register(store, &format!("{name}.bn2"), out_ch)?,
        })
    }

    /// Two conv-BN-ReLU stages, then bilinear resize to `out_h×out_w`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        f: Var,
        out_h: usize,
        out_w: usize,
        mode: BnMode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let x = self.conv1.forward(g, store, f)?;
        let x = self.bn1.forward(g, store, x, mode, updates)?;
        let x = g.relu(x)?;
        let x = self.conv2.forward(g, store, x)?;
        let x = self.bn2.forward(g, store, x, mode, updates)?;
        let x = g.relu(x)?;
        let s = g.shape(x);
        if (s[1], s[2]) == (out_h, out_w) {
            Ok(x)
        } else {
            g.upsample_bilinear(x, out_h, out_w)
        }
    }
}

#[derive(Debug, Clone)]
pub struct Neck {
    pub cnbs: Vec<Cnb>,
    pub proj: Linear,
    pub norm: LayerNorm,
}

impl Neck {
    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let c = cfg.neck_channels;
        let cnbs = cfg
            .stage_widths
            .iter()
            .enumerate()
            .map(|(i, &w)| Cnb::register(store, &format!("neck.cnb{i}"), w, c, rng))
            .collect::<Result<Vec<_>>>()?;
        let proj = Linear::register(store, "neck.proj", c * cnbs.len(), c, true, rng)?;
        let norm = LayerNorm::register(store, "neck.proj.norm", c)?;
        Ok(Self { cnbs, proj, norm })
    }

    /// Per-level blocks `g_i`, all at the size of the first level.
    pub fn levels<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pyramid: &[Var],
        mode: BnMode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Vec<Var>> {
        if pyramid.len() != self.cnbs.len() {
            bail!(Shape, "{} pyramid levels for {} neck blocks", pyramid.len(), self.cnbs.len());
        }
        let s0 = g.shape(pyramid[0]).to_vec();
        pyramid.iter().zip(&self.cnbs).map(|(&f, cnb)| cnb.forward(g, store, f, s0[1], s0[2], mode, updates)).collect()
    }

    /// Concatenate the levels, project to the neck width and normalize.
    pub fn fuse<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, levels: &[Var]) -> Result<Var> {
        let x = g.concat_last(levels)?;
        let x = self.proj.forward(g, store, x)?;
        self.norm.forward(g, store, x)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        pyramid: &[Var],
        mode: BnMode,
        updates: &mut Vec<BnUpdate<T>>,
    ) -> Result<Var> {
        let levels = self.levels(g, store, pyramid, mode, updates)?;
        self.fuse(g, store, &levels)
    }
}
