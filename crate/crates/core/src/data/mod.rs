//! Synthetic scenes, label sparsification and clipping, augmentation, and
//! batching for the model.

mod scene;

use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

#[allow(unused_imports)]
use num_traits::Float as _;

pub use scene::{derive_seed, random_descriptor, render, Primitive, Render, SceneConfig, SceneDescriptor, Texture, GENERATOR_VERSION};

use crate::error::{bail, Result};
use crate::losses_metrics::{project_labels, DepthMap};
use crate::model::PATCH;
use crate::numerics::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub height: usize,
    pub width: usize,
    /// `H×W×3`, row-major, values in `[0, 1]`.
    pub rgb: Vec<f32>,
    /// Exact dense depth in meters.
    pub depth: Vec<f32>,
    /// Pixels whose depth is used as a label.
    pub valid: Vec<bool>,
    pub seed: u64,
    pub descriptor: SceneDescriptor,
}

impl SceneSample {
    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Sparse labels as a depth map.
    pub fn labels(&self) -> DepthMap {
        DepthMap {
            height: self.height,
            width: self.width,
            values: self.depth.iter().map(|&d| d as f64).collect(),
            valid: self.valid.clone(),
        }
    }

    /// Every pixel as a label.
    pub fn dense_labels(&self) -> DepthMap {
        DepthMap { valid: alloc::vec![true; self.pixels()], ..self.labels() }
    }
}

/// Lays out and renders the scene for `seed`; every pixel starts valid.
pub fn generate_scene(seed: u64, cfg: &SceneConfig) -> Result<SceneSample> {
    let mut rng = scene::rng_for(seed);
    let descriptor = random_descriptor(cfg, &mut rng)?;
    let Render { rgb, depth, .. } = render(cfg, &descriptor);
    Ok(SceneSample { height: cfg.height, width: cfg.width, rgb, depth, valid: alloc::vec![true; cfg.height * cfg.width], seed, descriptor })
}

/// Keeps exactly `round(rate·H·W)` labels, chosen uniformly without
/// replacement.
pub fn sparsify_labels(sample: &mut SceneSample, rate: f64, seed: u64) -> Result<()> {
    if !(rate > 0.0 && rate <= 1.0) {
        bail!(Usage, "sparsity rate {rate} outside (0, 1]");
    }
    let n = sample.pixels();
    let keep = (rate * n as f64).round() as usize;
    let mut rng = scene::rng_for(seed);
    sample.valid.iter_mut().for_each(|v| *v = false);
    for i in rand::seq::index::sample(&mut rng, n, keep) {
        sample.valid[i] = true;
    }
    Ok(())
}

/// Drops labels deeper than `d_clip`; depth values are left as they are.
pub fn clip_labels(sample: &mut SceneSample, d_clip: f64, d_min: f64, d_max: f64) -> Result<()> {
    if !(d_clip > d_min && d_clip <= d_max) {
        bail!(Usage, "d_clip {d_clip} outside ({d_min}, {d_max}]");
    }
    for (v, &d) in sample.valid.iter_mut().zip(&sample.depth) {
        if d as f64 > d_clip {
            *v = false;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AugmentFlags {
    pub flip: bool,
    pub brightness: bool,
    pub color: bool,
}

impl AugmentFlags {
    pub const ALL: Self = Self { flip: true, brightness: true, color: true };
}

/// Mirrors rgb, depth and mask left to right.
pub fn flip_horizontal(sample: &mut SceneSample) {
    let w = sample.width;
    for r in 0..sample.height {
        let row = r * w;
        sample.depth[row..row + w].reverse();
        sample.valid[row..row + w].reverse();
        for c in 0..w / 2 {
            for j in 0..3 {
                sample.rgb.swap((row + c) * 3 + j, (row + w - 1 - c) * 3 + j);
            }
        }
    }
}

/// Multiplies channel `j` by `factors[j]` and clamps to `[0, 1]`.
pub fn scale_colors(sample: &mut SceneSample, factors: [f32; 3]) {
    for px in sample.rgb.chunks_mut(3) {
        for (v, f) in px.iter_mut().zip(factors) {
            *v = (*v * f).clamp(0.0, 1.0);
        }
    }
}

/// Random flip (probability ½), brightness `u ∈ [0.8, 1.2]` and per-channel
/// colour `u ∈ [0.9, 1.1]`, as enabled by `flags`.
pub fn augment_sample(sample: &mut SceneSample, seed: u64, flags: AugmentFlags) {
    let mut rng = scene::rng_for(seed);
    let flip = rng.random_bool(0.5);
    let bright: f32 = rng.random_range(0.8..=1.2);
    let color: [f32; 3] = [rng.random_range(0.9..=1.1), rng.random_range(0.9..=1.1), rng.random_range(0.9..=1.1)];
    if flags.flip && flip {
        flip_horizontal(sample);
    }
    if flags.brightness {
        scale_colors(sample, [bright; 3]);
    }
    if flags.color {
        scale_colors(sample, color);
    }
}

/// Model input and supervision for a group of samples.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    /// `B×H×W×3`.
    pub images: Tensor<T>,
    /// Labels projected to the depth-map scale (1/4).
    pub labels: Vec<DepthMap>,
    /// Labels at full resolution.
    pub full_labels: Vec<DepthMap>,
}

pub fn make_batch<T: Scalar>(samples: &[&SceneSample]) -> Result<Batch<T>> {
    let Some(first) = samples.first() else {
        bail!(Usage, "empty batch");
    };
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(samples.len() * h * w * 3);
    let mut labels = Vec::with_capacity(samples.len());
    let mut full_labels = Vec::with_capacity(samples.len());
    for s in samples {
        if (s.height, s.width) != (h, w) {
            bail!(Shape, "batch mixes {h}×{w} and {}×{} samples", s.height, s.width);
        }
        data.extend(s.rgb.iter().map(|&v| T::from_f64_lossy(v as f64)));
        let full = s.labels();
        labels.push(project_labels(&full, PATCH)?);
        full_labels.push(full);
    }
    Ok(Batch { images: Tensor::new(alloc::vec![samples.len(), h, w, 3], data)?, labels, full_labels })
}
