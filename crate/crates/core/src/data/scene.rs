//! Ray-cast toy scenes with exact depth.
//!
//! A horizontal pinhole camera (focal length = image width in pixels) sits
//! above a ground plane and looks along +z. Boxes stand on the ground; walls
//! are vertical rectangles yawed a little away from fronto-parallel. Every
//! surface gets a texture drawn independently of its geometry, so colour
//! edges and depth edges do not line up.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

#[allow(unused_imports)]
use num_traits::Float as _;

pub const GENERATOR_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub d_min: f64,
    pub d_max: f64,
    pub camera_height: f64,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub min_walls: usize,
    pub max_walls: usize,
    pub max_retries: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            d_min: 1.0,
            d_max: 20.0,
            camera_height: 1.5,
            min_boxes: 1,
            max_boxes: 4,
            min_walls: 1,
            max_walls: 2,
            max_retries: 200,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 32 != 0 || self.width % 32 != 0 {
            bail!(Usage, "image size {}×{} must be a positive multiple of 32", self.height, self.width);
        }
        if !(self.d_min > 0.0 && self.d_max > self.d_min && self.d_max.is_finite()) {
            bail!(Config, "depth range [{}, {}] is invalid", self.d_min, self.d_max);
        }
        if !(self.camera_height > 0.0) || self.min_boxes > self.max_boxes || self.min_walls > self.max_walls {
            bail!(Config, "camera height and primitive counts are inconsistent");
        }
        Ok(())
    }

    fn focal(&self) -> f64 {
        self.width as f64
    }

    /// Unnormalized ray through the centre of pixel `(r, c)`; `z` component 1,
    /// so the hit parameter is the z-depth.
    fn ray(&self, r: usize, c: usize) -> [f64; 3] {
        let f = self.focal();
        [(c as f64 + 0.5 - self.width as f64 / 2.0) / f, -(r as f64 + 0.5 - self.height as f64 / 2.0) / f, 1.0]
    }

    /// Depth of the bare ground plane at row `r`, clamped into range; rows at
    /// or above the horizon see the far backdrop.
    pub fn ground_depth(&self, r: usize) -> f64 {
        let below = r as f64 + 0.5 - self.height as f64 / 2.0;
        if below <= 0.0 {
            return self.d_max;
        }
        (self.camera_height * self.focal() / below).clamp(self.d_min, self.d_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Flat { color: [f32; 3] },
    Checker { a: [f32; 3], b: [f32; 3], period: f64 },
    Stripes { a: [f32; 3], b: [f32; 3], period: f64, angle: f64 },
    Gradient { a: [f32; 3], b: [f32; 3], period: f64, angle: f64 },
}

impl Texture {
    fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let color = |rng: &mut R| [rng.random_range(0.05..0.95f32), rng.random_range(0.05..0.95f32), rng.random_range(0.05..0.95f32)];
        let a = color(rng);
        let b = color(rng);
        let period = rng.random_range(0.3..2.0);
        let angle = rng.random_range(0.0..core::f64::consts::PI);
        match rng.random_range(0..4) {
            0 => Texture::Flat { color: a },
            1 => Texture::Checker { a, b, period },
            2 => Texture::Stripes { a, b, period, angle },
            _ => Texture::Gradient { a, b, period: period * 3.0, angle },
        }
    }

    /// Colour at surface coordinates `(u, v)` in meters.
    pub fn sample(&self, u: f64, v: f64) -> [f32; 3] {
        let mix = |a: &[f32; 3], b: &[f32; 3], t: f64| {
            let t = t as f32;
            [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
        };
        match self {
            Texture::Flat { color } => *color,
            Texture::Checker { a, b, period } => {
                let k = (u / period).floor() as i64 + (v / period).floor() as i64;
                if k.rem_euclid(2) == 0 { *a } else { *b }
            }
            Texture::Stripes { a, b, period, angle } => {
                let s = u * angle.cos() + v * angle.sin();
                if ((s / period).floor() as i64).rem_euclid(2) == 0 { *a } else { *b }
            }
            Texture::Gradient { a, b, period, angle } => {
                let s = u * angle.cos() + v * angle.sin();
                let t = num_traits::Euclid::rem_euclid(&(s / period), &2.0);
                mix(a, b, if t > 1.0 { 2.0 - t } else { t })
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Primitive {
    /// Axis-aligned box standing on the ground.
    Box { min: [f64; 3], max: [f64; 3], texture: Texture },
    /// Vertical rectangle through `center` (on the ground), yawed by `yaw`
    /// radians about the vertical axis.
    Wall { center: [f64; 3], half_width: f64, height: f64, yaw: f64, texture: Texture },
}

impl Primitive {
    /// Nearest positive hit `(t, u, v, shade)` along `dir` from the origin.
    fn intersect(&self, dir: &[f64; 3]) -> Option<(f64, f64, f64, f32)> {
        match self {
            Primitive::Box { min, max, .. } => {
                let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
                let mut axis = 0;
                for a in 0..3 {
                    if dir[a] == 0.0 {
                        if 0.0 < min[a] || 0.0 > max[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut n, mut f) = (min[a] / dir[a], max[a] / dir[a]);
                    if n > f {
                        core::mem::swap(&mut n, &mut f);
                    }
                    if n > t0 {
                        t0 = n;
                        axis = a;
                    }
                    t1 = t1.min(f);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let p = [dir[0] * t0, dir[1] * t0, dir[2] * t0];
                let (u, v, shade) = match axis {
                    0 => (p[2], p[1], 0.8),
                    1 => (p[0], p[2], 1.0),
                    _ => (p[0], p[1], 0.9),
                };
                Some((t0, u, v, shade))
            }
            Primitive::Wall { center, half_width, height, yaw, .. } => {
                let n = [yaw.sin(), 0.0, -yaw.cos()];
                let denom = n[0] * dir[0] + n[2] * dir[2];
                if denom.abs() < 1e-12 {
                    return None;
                }
                let t = (n[0] * center[0] + n[2] * center[2]) / denom;
                if t <= 0.0 {
                    return None;
                }
                let p = [dir[0] * t, dir[1] * t, dir[2] * t];
                let along = (p[0] - center[0]) * yaw.cos() + (p[2] - center[2]) * yaw.sin();
                let up = p[1] - center[1];
                if along.abs() > *half_width || !(0.0..=*height).contains(&up) {
                    return None;
                }
                Some((t, along, up, 0.95))
            }
        }
    }

    fn texture(&self) -> &Texture {
        match self {
            Primitive::Box { texture, .. } | Primitive::Wall { texture, .. } => texture,
        }
    }

    /// Ground footprint as `[x0, x1, z0, z1]`.
    fn footprint(&self) -> [f64; 4] {
        match self {
            Primitive::Box { min, max, .. } => [min[0], max[0], min[2], max[2]],
            Primitive::Wall { center, half_width, yaw, .. } => {
                let (dx, dz) = (half_width * yaw.cos(), half_width * yaw.sin());
                [center[0] - dx.abs(), center[0] + dx.abs(), center[2] - dz.abs(), center[2] + dz.abs()]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescriptor {
    pub ground: Texture,
    pub primitives: Vec<Primitive>,
}

/// Rendered scene: `rgb` is `H×W×3` in `[0, 1]`, `depth` is the exact
/// z-depth clamped into range, `hits` the primitive index per pixel
/// (`None` for ground and backdrop).
#[derive(Debug, Clone, PartialEq)]
pub struct Render {
    pub rgb: Vec<f32>,
    pub depth: Vec<f32>,
    pub hits: Vec<Option<usize>>,
}

fn overlaps(a: &[f64; 4], b: &[f64; 4], gap: f64) -> bool {
    a[0] < b[1] + gap && b[0] < a[1] + gap && a[2] < b[3] + gap && b[2] < a[3] + gap
}

/// Random non-overlapping scene layout.
pub fn random_descriptor<R: Rng + ?Sized>(cfg: &SceneConfig, rng: &mut R) -> Result<SceneDescriptor> {
    cfg.validate()?;
    let n_boxes = rng.random_range(cfg.min_boxes..=cfg.max_boxes);
    let n_walls = rng.random_range(cfg.min_walls..=cfg.max_walls);
    let half_fov = cfg.width as f64 / 2.0 / cfg.focal();
    let z_lo = (cfg.d_min + 2.0).min(cfg.d_max * 0.5);
    let z_hi = cfg.d_max * 0.9;
    let ground_y = -cfg.camera_height;
    let mut primitives: Vec<Primitive> = Vec::with_capacity(n_boxes + n_walls);
    let mut footprints: Vec<[f64; 4]> = Vec::new();
    for k in 0..n_boxes + n_walls {
        let mut placed = false;
        for _ in 0..cfg.max_retries {
            let z = rng.random_range(z_lo..z_hi);
            let x = rng.random_range(-0.9..0.9) * half_fov * z;
            let p = if k < n_boxes {
                let (hw, hd) = (rng.random_range(0.3..1.5), rng.random_range(0.3..1.5));
                let h = rng.random_range(0.5..3.0);
                Primitive::Box { min: [x - hw, ground_y, z - hd], max: [x + hw, ground_y + h, z + hd], texture: Texture::random(rng) }
            } else {
                Primitive::Wall {
                    center: [x, ground_y, z],
                    half_width: rng.random_range(1.0..4.0),
                    height: rng.random_range(1.5..5.0),
                    yaw: rng.random_range(-0.5..0.5),
                    texture: Texture::random(rng),
                }
            };
            let fp = p.footprint();
            if fp[2] <= 0.5 || footprints.iter().any(|o| overlaps(o, &fp, 0.2)) {
                continue;
            }
            footprints.push(fp);
            primitives.push(p);
            placed = true;
            break;
        }
        if !placed {
            bail!(Generation, "could not place primitive {k} without overlap after {} tries", cfg.max_retries);
        }
    }
    Ok(SceneDescriptor { ground: Texture::random(rng), primitives })
}

const SKY_TOP: [f32; 3] = [0.55, 0.7, 0.95];
const SKY_HORIZON: [f32; 3] = [0.85, 0.88, 0.92];

/// Ray-casts a descriptor.
pub fn render(cfg: &SceneConfig, scene: &SceneDescriptor) -> Render {
    let (h, w) = (cfg.height, cfg.width);
    let mut rgb = vec![0.0f32; h * w * 3];
    let mut depth = vec![0.0f32; h * w];
    let mut hits = vec![None; h * w];
    for r in 0..h {
        for c in 0..w {
            let dir = cfg.ray(r, c);
            let mut best: Option<(f64, usize, f64, f64, f32)> = None;
            for (i, p) in scene.primitives.iter().enumerate() {
                if let Some((t, u, v, s)) = p.intersect(&dir) {
                    if best.is_none_or(|b| t < b.0) {
                        best = Some((t, i, u, v, s));
                    }
                }
            }
            let ground_t = if dir[1] < 0.0 { Some(cfg.camera_height / -dir[1]) } else { None };
            let (t, color) = match (best, ground_t) {
                (Some((t, i, u, v, s)), g) if g.is_none_or(|g| t <= g) => {
                    hits[r * w + c] = Some(i);
                    let col = scene.primitives[i].texture().sample(u, v);
                    (t, [col[0] * s, col[1] * s, col[2] * s])
                }
                (_, Some(g)) => (g, scene.ground.sample(dir[0] * g, g)),
                _ => {
                    let k = (r as f32 / (h as f32 / 2.0)).min(1.0);
                    (cfg.d_max, [0, 1, 2].map(|j| SKY_TOP[j] + (SKY_HORIZON[j] - SKY_TOP[j]) * k))
                }
            };
            let d = t.clamp(cfg.d_min, cfg.d_max);
            let fog = (0.25 * d / cfg.d_max) as f32;
            depth[r * w + c] = d as f32;
            for j in 0..3 {
                rgb[(r * w + c) * 3 + j] = (color[j] * (1.0 - fog) + SKY_HORIZON[j] * fog).clamp(0.0, 1.0);
            }
        }
    }
    Render { rgb, depth, hits }
}

/// Per-sample seed derived from a dataset seed and sample index.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    // splitmix64 finalizer over a golden-ratio stride
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
