use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::backbone::PATCH;
use crate::error::{bail, Result};
use crate::relbias::BinConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    /// Refinement iterations `K`.
    pub iterations: usize,
    pub blocks_per_iteration: usize,
    pub num_heads: usize,
    pub window: usize,
    pub shift: usize,
    /// Width after the feed-forward gate, as a multiple of the channels.
    pub cff_ratio: usize,
    pub deb_channels: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { iterations: 3, blocks_per_iteration: 2, num_heads: 8, window: 8, shift: 4, cff_ratio: 1, deb_channels: 16 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub stage_widths: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub backbone_window: usize,
    pub backbone_head_dim: usize,
    pub mlp_ratio: usize,
    pub neck_channels: usize,
    pub head: HeadConfig,
    pub bins: BinConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            stage_widths: vec![32, 64, 128, 256],
            stage_depths: vec![2, 2, 2, 2],
            backbone_window: 4,
            backbone_head_dim: 16,
            mlp_ratio: 2,
            neck_channels: 32,
            head: HeadConfig::default(),
            bins: BinConfig { d_min: 1.0, d_max: 20.0, num_bins: 128 },
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.len() != 4 || self.stage_depths.len() != 4 {
            bail!(Config, "the backbone has exactly four stages");
        }
        let span = PATCH << 3;
        if self.height == 0 || self.width == 0 || self.height % span != 0 || self.width % span != 0 {
            bail!(Usage, "input {}×{} must be a positive multiple of {span}", self.height, self.width);
        }
        if self.backbone_head_dim == 0 || self.stage_widths.iter().any(|&c| c == 0 || c % self.backbone_head_dim != 0) {
            bail!(Config, "stage widths {:?} must be multiples of head dim {}", self.stage_widths, self.backbone_head_dim);
        }
        if self.stage_depths.iter().any(|&d| d == 0) || self.backbone_window == 0 || self.mlp_ratio == 0 {
            bail!(Config, "backbone depths, window and mlp ratio must be positive");
        }
        let h = &self.head;
        if h.iterations == 0 || h.blocks_per_iteration == 0 || h.cff_ratio == 0 || h.deb_channels == 0 {
            bail!(Config, "head iterations, blocks, cff ratio and DEB width must be positive");
        }
        if h.num_heads == 0 || self.neck_channels == 0 || self.neck_channels % h.num_heads != 0 {
            bail!(Config, "neck width {} is not divisible into {} heads", self.neck_channels, h.num_heads);
        }
        if h.window == 0 || h.shift >= h.window {
            bail!(Config, "head shift {} must be below window {}", h.shift, h.window);
        }
        self.bins.validate()
    }

    /// Spatial size of stage `s` (stage 0 is 1/4 scale).
    pub fn stage_size(&self, s: usize) -> (usize, usize) {
        ((self.height / PATCH) >> s, (self.width / PATCH) >> s)
    }

    /// Number of depth maps emitted, `K + 1`.
    pub fn num_maps(&self) -> usize {
        self.head.iterations + 1
    }
}
