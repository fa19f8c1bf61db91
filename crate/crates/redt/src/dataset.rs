//! On-disk datasets: one directory per sample holding `rgb.rdt`,
//! `depth.rdt` and `meta.json`, and a `manifest.json` at the root.
//!
//! The depth file stores labels only; unlabeled pixels are written as 0.0.
//! Dense depth is restored on read by re-rendering the stored descriptor.

use std::fs;
use std::path::{Path, PathBuf};

use redt_core::data::{derive_seed, generate_scene, render, sparsify_labels, SceneConfig, SceneDescriptor, SceneSample, GENERATOR_VERSION};
use redt_core::numerics::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};
use crate::formats::{read_tensor, write_tensor};

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn dir(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn salt(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Sample directory relative to the dataset root.
    pub file: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator_version: u32,
    pub seed: u64,
    pub scene: SceneConfig,
    pub sparsity: f64,
    /// Training-label clip recorded at generation time; files keep every label.
    pub d_clip: Option<f64>,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn entries(&self, split: Split) -> &[ManifestEntry] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenOptions {
    pub scene: SceneConfig,
    pub train: usize,
    pub test: usize,
    pub sparsity: f64,
    pub d_clip: Option<f64>,
    pub seed: u64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self { scene: SceneConfig::default(), train: 512, test: 64, sparsity: 0.15, d_clip: None, seed: 0 }
    }
}

#[derive(Serialize, Deserialize)]
struct SampleMeta {
    seed: u64,
    descriptor: SceneDescriptor,
}

/// Seed of sample `index` in `split` of a dataset seeded with `seed`.
pub fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(derive_seed(seed, split.salt()), index as u64)
}

/// Rendered, sparsified sample exactly as `generate_dataset` writes it.
pub fn make_sample(seed: u64, scene: &SceneConfig, sparsity: f64) -> AppResult<SceneSample> {
    let mut s = generate_scene(seed, scene)?;
    sparsify_labels(&mut s, sparsity, derive_seed(seed, 1))?;
    Ok(s)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> AppResult<T> {
    let text = fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| AppError::json(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> AppResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

pub fn write_sample(dir: &Path, sample: &SceneSample) -> AppResult<()> {
    fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    let (h, w) = (sample.height, sample.width);
    write_tensor(&dir.join("rgb.rdt"), &Tensor::new(vec![h, w, 3], sample.rgb.clone())?)?;
    let labels = sample.depth.iter().zip(&sample.valid).map(|(&d, &v)| if v { d } else { 0.0 }).collect();
    write_tensor(&dir.join("depth.rdt"), &Tensor::new(vec![h, w], labels)?)?;
    write_json(&dir.join("meta.json"), &SampleMeta { seed: sample.seed, descriptor: sample.descriptor.clone() })
}

/// Reads a sample; non-positive depth on disk marks an unlabeled pixel.
pub fn read_sample(dir: &Path, scene: &SceneConfig) -> AppResult<SceneSample> {
    let meta: SampleMeta = read_json(&dir.join("meta.json"))?;
    let (h, w) = (scene.height, scene.width);
    let rgb_path = dir.join("rgb.rdt");
    let rgb = read_tensor(&rgb_path)?;
    if rgb.shape() != [h, w, 3] {
        return Err(AppError::Core(redt_core::Error::Data(format!("{}: shape {:?}, expected [{h}, {w}, 3]", rgb_path.display(), rgb.shape()))));
    }
    let depth_path = dir.join("depth.rdt");
    let labels = read_tensor(&depth_path)?;
    if labels.shape() != [h, w] {
        return Err(AppError::Core(redt_core::Error::Data(format!("{}: shape {:?}, expected [{h}, {w}]", depth_path.display(), labels.shape()))));
    }
    let valid: Vec<bool> = labels.data().iter().map(|&d| d > 0.0).collect();
    let mut depth = render(scene, &meta.descriptor).depth;
    for ((d, &l), &v) in depth.iter_mut().zip(labels.data()).zip(&valid) {
        if v {
            *d = l;
        }
    }
    Ok(SceneSample { height: h, width: w, rgb: rgb.into_data(), depth, valid, seed: meta.seed, descriptor: meta.descriptor })
}

pub fn generate_dataset(root: &Path, opts: &GenOptions) -> AppResult<DatasetManifest> {
    opts.scene.validate()?;
    if !(opts.sparsity > 0.0 && opts.sparsity <= 1.0) {
        return Err(AppError::Usage(format!("sparsity {} outside (0, 1]", opts.sparsity)));
    }
    if let Some(c) = opts.d_clip {
        if !(c > opts.scene.d_min && c <= opts.scene.d_max) {
            return Err(AppError::Usage(format!("d_clip {c} outside ({}, {}]", opts.scene.d_min, opts.scene.d_max)));
        }
    }
    let mut lists = [Vec::new(), Vec::new()];
    for (split, count) in [(Split::Train, opts.train), (Split::Test, opts.test)] {
        for i in 0..count {
            let seed = sample_seed(opts.seed, split, i);
            let file = format!("{}/{i:05}", split.dir());
            write_sample(&root.join(&file), &make_sample(seed, &opts.scene, opts.sparsity)?)?;
            lists[split.salt() as usize].push(ManifestEntry { file, seed });
        }
    }
    let [train, test] = lists;
    let manifest = DatasetManifest {
        generator_version: GENERATOR_VERSION,
        seed: opts.seed,
        scene: opts.scene.clone(),
        sparsity: opts.sparsity,
        d_clip: opts.d_clip,
        train,
        test,
    };
    write_json(&root.join(MANIFEST), &manifest)?;
    Ok(manifest)
}

pub fn read_manifest(root: &Path) -> AppResult<DatasetManifest> {
    let m: DatasetManifest = read_json(&root.join(MANIFEST))?;
    if m.generator_version != GENERATOR_VERSION {
        return Err(AppError::Core(redt_core::Error::Data(format!(
            "dataset generator version {} differs from {GENERATOR_VERSION}",
            m.generator_version
        ))));
    }
    Ok(m)
}

pub fn load_split(root: &Path, split: Split) -> AppResult<(DatasetManifest, Vec<SceneSample>)> {
    let m = read_manifest(root)?;
    let samples = m.entries(split).iter().map(|e| read_sample(&root.join(&e.file), &m.scene)).collect::<AppResult<Vec<_>>>()?;
    Ok((m, samples))
}

/// Directory of one sample.
pub fn sample_dir(root: &Path, entry: &ManifestEntry) -> PathBuf {
    root.join(&entry.file)
}
