//! The full network: windowed-transformer backbone, multi-scale neck and the
//! iterative depth-relative head.

mod backbone;
mod config;
mod head;
mod layers;
mod neck;

use alloc::vec::Vec;

use rand::Rng;

pub use backbone::{block_shift, fit_window, space_to_depth_indices, Backbone, BackboneBlock, Stage, PATCH};
pub use config::{HeadConfig, ModelConfig};
pub use head::{Cff, Deb, Head, HeadBlock};
pub use layers::{apply_bn_updates, BatchNorm, BnMode, BnUpdate, Conv2d, DepthwiseConv2d, LayerNorm, Linear, BN_MOMENTUM};
pub use neck::{Cnb, Neck};

use crate::error::{bail, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Tensor, Var};

/// Suffix shared by every depth-relative bias table.
pub const THETA_SUFFIX: &str = ".theta_de";

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub neck: Neck,
    pub head: Head,
}

#[derive(Debug, Clone)]
pub struct ModelOutput<T> {
    pub pyramid: Vec<Var>,
    pub neck: Var,
    /// `D_0..D_K`, each `B×(H/4)×(W/4)×1`.
    pub depths: Vec<Var>,
    /// `D_K` resized to `B×H×W×1`.
    pub full: Var,
    pub bn_updates: Vec<BnUpdate<T>>,
}

impl Model {
    /// Registers every parameter in `store` with fresh initial values.
    pub fn new<T: Scalar, R: Rng + ?Sized>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::register(store, &config, rng)?;
        let neck = Neck::register(store, &config, rng)?;
        let head = Head::register(store, &config, rng)?;
        Ok(Self { config, backbone, neck, head })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: &Tensor<T>, mode: BnMode) -> Result<ModelOutput<T>> {
        let s = images.shape();
        if s.len() != 4 || s[1] != self.config.height || s[2] != self.config.width || s[3] != 3 {
            bail!(Usage, "model expects B×{}×{}×3 images, got {s:?}", self.config.height, self.config.width);
        }
        let x = g.input(images);
        let mut bn_updates = Vec::new();
        let pyramid = self.backbone.forward(g, store, x)?;
        let neck = self.neck.forward(g, store, &pyramid, mode, &mut bn_updates)?;
        let depths = self.head.forward(g, store, neck)?;
        let last = *depths.last().expect("at least D_0");
        let full = g.upsample_bilinear(last, self.config.height, self.config.width)?;
        for &d in &depths {
            let (lo, hi) = (T::from_f64_lossy(self.config.bins.d_min), T::from_f64_lossy(self.config.bins.d_max));
            if g.value(d).iter().any(|&v| !(v >= lo && v <= hi)) {
                bail!(Numerical, "depth map left [{}, {}]", self.config.bins.d_min, self.config.bins.d_max);
            }
        }
        Ok(ModelOutput { pyramid, neck, depths, full, bn_updates })
    }
}

/// Freezes (or thaws) every θ_DE table; frozen tables are also reset to 0
/// so the head runs with `R = 0`.
pub fn set_rel_bias<T: Scalar>(store: &mut ParamStore<T>, enabled: bool) {
    for e in store.entries_mut() {
        if e.name.ends_with(THETA_SUFFIX) {
            e.frozen = !enabled;
            if !enabled {
                e.tensor.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
}
