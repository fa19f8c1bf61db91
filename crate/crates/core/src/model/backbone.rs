//! Miniature windowed transformer producing the four-level feature pyramid.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::config::ModelConfig;
use super::layers::{LayerNorm, Linear};
use crate::attention::{mhsa_block, AttentionConfig, MhsaParams, PositionBiasTable, WindowLayout};
use crate::error::{bail, Result};
use crate::numerics::{Graph, ParamStore, Scalar, Var};

pub const PATCH: usize = 4;

/// Largest window side not above `window` that tiles an `h×w` grid.
pub fn fit_window(window: usize, h: usize, w: usize) -> usize {
    (1..=window.min(h).min(w)).rev().find(|s| h % s == 0 && w % s == 0).unwrap_or(1)
}

/// Shift of block `b` of a stage: half a window on odd blocks, none when a
/// single window already covers the map.
pub fn block_shift(block: usize, window: usize, h: usize, w: usize) -> usize {
    if block % 2 == 1 && (window < h || window < w) {
        window / 2
    } else {
        0
    }
}

/// `x [B,H,W,C]` to `[B,H/s,W/s,s·s·C]`, each output row the `s×s` patch
/// in `[dy][dx][c]` order.
pub fn space_to_depth_indices(batch: usize, h: usize, w: usize, c: usize, s: usize) -> Vec<usize> {
    let (oh, ow) = (h / s, w / s);
    let mut idx = Vec::with_capacity(batch * h * w * c);
    for b in 0..batch {
        for oy in 0..oh {
            for ox in 0..ow {
                for dy in 0..s {
                    for dx in 0..s {
                        let base = ((b * h + oy * s + dy) * w + ox * s + dx) * c;
                        idx.extend(base..base + c);
                    }
                }
            }
        }
    }
    idx
}

#[derive(Debug, Clone)]
pub struct BackboneBlock {
    pub attn: MhsaParams,
    pub pos_bias: PositionBiasTable,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl BackboneBlock {
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var, batch: usize, h: usize, w: usize) -> Result<Var> {
        let cfg = self.attn.config;
        let layout = WindowLayout::new(batch, h, w, cfg.window, cfg.shift)?;
        let bias = self.pos_bias.bias(g, store)?;
        let x = mhsa_block(g, store, &self.attn, x, &layout, Some(bias))?;
        let y = self.norm2.forward(g, store, x)?;
        let y = self.fc1.forward(g, store, y)?;
        let y = g.gelu(y)?;
        let y = self.fc2.forward(g, store, y)?;
        g.add(x, y)
    }
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub blocks: Vec<BackboneBlock>,
    /// 2×2 patch merging into the next stage; absent on the last stage.
    pub merge: Option<(LayerNorm, Linear)>,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub embed: Linear,
    pub embed_norm: LayerNorm,
    pub stages: Vec<Stage>,
}

impl Backbone {
    pub fn register<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        let widths = &cfg.stage_widths;
        let embed = Linear::register(store, "backbone.patch_embed", PATCH * PATCH * 3, widths[0], true, rng)?;
        let embed_norm = LayerNorm::register(store, "backbone.patch_embed.norm", widths[0])?;
        let mut stages = Vec::with_capacity(widths.len());
        for (s, &c) in widths.iter().enumerate() {
            let (h, w) = cfg.stage_size(s);
            let win = fit_window(cfg.backbone_window, h, w);
            let mut blocks = Vec::with_capacity(cfg.stage_depths[s]);
            for b in 0..cfg.stage_depths[s] {
                let prefix = format!("backbone.stage{s}.block{b}");
                let acfg = AttentionConfig {
                    num_heads: c / cfg.backbone_head_dim,
                    head_dim: cfg.backbone_head_dim,
                    window: win,
                    shift: block_shift(b, win, h, w),
                };
                let attn = MhsaParams::register(store, &prefix, acfg, rng)?;
                let pos_bias = PositionBiasTable::register(store, &format!("{prefix}.attn.pos_bias"), win, acfg.num_heads)?;
                let norm2 = LayerNorm::register(store, &format!("{prefix}.norm2"), c)?;
                let hidden = c * cfg.mlp_ratio;
                let fc1 = Linear::register(store, &format!("{prefix}.mlp.fc1"), c, hidden, true, rng)?;
                let fc2 = Linear::register(store, &format!("{prefix}.mlp.fc2"), hidden, c, true, rng)?;
                blocks.push(BackboneBlock { attn, pos_bias, norm2, fc1, fc2 });
            }
            let merge = match widths.get(s + 1) {
                Some(&next) => Some((
                    LayerNorm::register(store, &format!("backbone.stage{s}.merge.norm"), 4 * c)?,
                    Linear::register(store, &format!("backbone.stage{s}.merge.reduction"), 4 * c, next, false, rng)?,
                )),
                None => None,
            };
            stages.push(Stage { blocks, merge });
        }
        Ok(Self { embed, embed_norm, stages })
    }

    /// Images `[B,H,W,3]` to features at 1/4, 1/8, 1/16 and 1/32 scale.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, images: Var) -> Result<Vec<Var>> {
        let shape = g.shape(images).to_vec();
        let [batch, height, width, 3] = shape[..] else {
            bail!(Shape, "expected B×H×W×3 images, got {shape:?}");
        };
        let span = PATCH << (self.stages.len() - 1);
        if height % span != 0 || width % span != 0 {
            bail!(Usage, "image {height}×{width} is not divisible by {span}");
        }
        let (mut h, mut w) = (height / PATCH, width / PATCH);
        let patches = g.gather(images, space_to_depth_indices(batch, height, width, 3, PATCH), &[batch, h, w, PATCH * PATCH * 3])?;
        let x = self.embed.forward(g, store, patches)?;
        let mut x = self.embed_norm.forward(g, store, x)?;
        let mut pyramid = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for block in &stage.blocks {
                x = block.forward(g, store, x, batch, h, w)?;
            }
            pyramid.push(x);
            if let Some((norm, reduce)) = &stage.merge {
                let c = *g.shape(x).last().expect("rank 4");
                let merged = g.gather(x, space_to_depth_indices(batch, h, w, c, 2), &[batch, h / 2, w / 2, 4 * c])?;
                let merged = norm.forward(g, store, merged)?;
                x = reduce.forward(g, store, merged)?;
                h /= 2;
                w /= 2;
            }
        }
        Ok(pyramid)
    }
}
