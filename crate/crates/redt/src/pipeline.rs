//! Training, evaluation and the paired rel-bias ablation.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use redt_core::data::{augment_sample, clip_labels, derive_seed, make_batch, AugmentFlags, SceneSample};
use redt_core::losses_metrics::{DepthMap, MetricAccumulator, MetricReport, METRIC_CSV_HEADER, RANGE_CSV_HEADER};
use redt_core::model::{set_rel_bias, BnMode, Model};
use redt_core::numerics::{Graph, ParamStore};
use redt_core::train::{StepStats, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{load_split, read_json, write_json, Split};
use crate::error::{AppError, AppResult};
use crate::formats::{read_checkpoint, write_checkpoint};

pub const CHECKPOINT: &str = "checkpoint.ckpt";
pub const RUN_CONFIG: &str = "config.json";
pub const LOSS_LOG: &str = "loss.csv";
pub const METRICS_CSV: &str = "metrics.csv";
pub const RANGES_CSV: &str = "ranges.csv";
pub const PER_MAP_CSV: &str = "per_map.csv";

const EVAL_BATCH: usize = 8;

const SALT_INIT: u64 = 0x1;
const SALT_ORDER: u64 = 0x2;
const SALT_AUGMENT: u64 = 0x3;

fn write_text(path: &Path, text: &str) -> AppResult<()> {
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

fn create_dir(path: &Path) -> AppResult<()> {
    fs::create_dir_all(path).map_err(|e| AppError::io(path, e))
}

/// Fresh model and parameters for `cfg`; the θ_DE tables are frozen at
/// zero when the relative bias is disabled.
pub fn init_model(cfg: &RunConfig) -> AppResult<(Model, ParamStore<f32>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, SALT_INIT));
    let mut store = ParamStore::new();
    let model = Model::new(cfg.model.clone(), &mut store, &mut rng)?;
    set_rel_bias(&mut store, cfg.rel_bias_enabled);
    Ok((model, store))
}

/// Deterministic stream of training-sample indices: one shuffled pass per
/// epoch.
struct SampleOrder {
    n: usize,
    seed: u64,
    epoch: usize,
    perm: Vec<usize>,
}

impl SampleOrder {
    fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, epoch: usize::MAX, perm: Vec::new() }
    }

    fn at(&mut self, pos: usize) -> usize {
        let epoch = pos / self.n;
        if epoch != self.epoch {
            self.perm = (0..self.n).collect();
            self.perm.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, epoch as u64)));
            self.epoch = epoch;
        }
        self.perm[pos % self.n]
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub store: ParamStore<f32>,
    pub log: Vec<StepStats>,
    pub seconds: f64,
}

fn loss_log(log: &[StepStats]) -> String {
    let maps = log.first().map_or(0, |s| s.per_map.len());
    let mut out = String::from("iter,lr,loss");
    (0..maps).for_each(|k| write!(out, ",loss_d{k}").unwrap());
    out.push_str(",grad_norm,clamped\n");
    for s in log {
        write!(out, "{},{},{}", s.iter, s.lr, s.loss).unwrap();
        s.per_map.iter().for_each(|v| write!(out, ",{v}").unwrap());
        writeln!(out, ",{},{}", s.grad_norm, s.clamped).unwrap();
    }
    out
}

/// Trains on the dataset's train split and writes the checkpoint, the
/// per-step loss log and the resolved config into `out`. On a numerical
/// failure the last finite parameters are still written before the error
/// is returned.
pub fn train(cfg: &RunConfig, out: &Path, mut progress: impl FnMut(&StepStats)) -> AppResult<TrainOutcome> {
    let started = Instant::now();
    let (manifest, mut samples) = load_split(&cfg.dataset, Split::Train)?;
    let mut cfg = cfg.clone();
    cfg.d_clip = cfg.d_clip.or(manifest.d_clip);
    cfg.validate()?;
    if (manifest.scene.height, manifest.scene.width) != (cfg.model.height, cfg.model.width) {
        return Err(AppError::Usage(format!(
            "dataset is {}×{} but the model expects {}×{}",
            manifest.scene.height, manifest.scene.width, cfg.model.height, cfg.model.width
        )));
    }
    if samples.is_empty() {
        return Err(AppError::Usage("training split is empty".into()));
    }
    if let Some(c) = cfg.d_clip {
        for s in &mut samples {
            clip_labels(s, c, manifest.scene.d_min, manifest.scene.d_max)?;
        }
    }
    create_dir(out)?;
    write_json(&out.join(RUN_CONFIG), &cfg)?;

    let (model, mut store) = init_model(&cfg)?;
    let mut trainer = Trainer::new(cfg.settings(), &store)?;
    let mut order = SampleOrder::new(samples.len(), derive_seed(cfg.seed, SALT_ORDER));
    let flags = if cfg.augment { AugmentFlags::ALL } else { AugmentFlags::default() };
    let aug_seed = derive_seed(cfg.seed, SALT_AUGMENT);
    let mut log = Vec::with_capacity(cfg.total_iters as usize);
    let per_step = cfg.batch_size * cfg.accum_steps;
    let mut failure = None;
    for it in 0..cfg.total_iters as usize {
        let mut micro = Vec::with_capacity(cfg.accum_steps);
        for m in 0..cfg.accum_steps {
            let batch: Vec<SceneSample> = (0..cfg.batch_size)
                .map(|j| {
                    let pos = it * per_step + m * cfg.batch_size + j;
                    let mut s = samples[order.at(pos)].clone();
                    augment_sample(&mut s, derive_seed(aug_seed, pos as u64), flags);
                    s
                })
                .collect();
            let refs: Vec<&SceneSample> = batch.iter().collect();
            micro.push(make_batch::<f32>(&refs)?);
        }
        match trainer.step(&model, &mut store, &micro) {
            Ok(stats) => {
                progress(&stats);
                log.push(stats);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    write_checkpoint(&out.join(CHECKPOINT), &store)?;
    write_text(&out.join(LOSS_LOG), &loss_log(&log))?;
    if let Some(e) = failure {
        return Err(e.into());
    }
    Ok(TrainOutcome { model, store, log, seconds: started.elapsed().as_secs_f64() })
}

/// Loads a trained run directory (config and checkpoint).
pub fn load_run(dir: &Path) -> AppResult<(RunConfig, Model, ParamStore<f32>)> {
    let cfg: RunConfig = read_json(&dir.join(RUN_CONFIG))?;
    let (model, mut store) = init_model(&cfg)?;
    read_checkpoint(&dir.join(CHECKPOINT), &mut store)?;
    Ok((cfg, model, store))
}

/// Source of depth maps `D_0..D_K` at full image resolution.
pub trait Predictor {
    fn predict(&mut self, samples: &[&SceneSample]) -> AppResult<Vec<Vec<DepthMap>>>;
}

pub struct ModelPredictor<'a> {
    pub model: &'a Model,
    pub store: &'a ParamStore<f32>,
}

impl Predictor for ModelPredictor<'_> {
    fn predict(&mut self, samples: &[&SceneSample]) -> AppResult<Vec<Vec<DepthMap>>> {
        let batch = make_batch::<f32>(samples)?;
        let mut g = Graph::new();
        let out = self.model.forward(&mut g, self.store, &batch.images, BnMode::Eval)?;
        let (h, w) = (self.model.config.height, self.model.config.width);
        let mut per_sample = vec![Vec::with_capacity(out.depths.len()); samples.len()];
        for &d in &out.depths {
            let up = g.upsample_bilinear(d, h, w)?;
            for (b, maps) in per_sample.iter_mut().enumerate() {
                let vals = g.value(up)[b * h * w..(b + 1) * h * w].iter().map(|&v| v as f64).collect();
                maps.push(DepthMap::dense(h, w, vals)?);
            }
        }
        Ok(per_sample)
    }
}

/// Predicts the exact dense depth for every map.
pub struct OraclePredictor {
    pub maps: usize,
}

impl Predictor for OraclePredictor {
    fn predict(&mut self, samples: &[&SceneSample]) -> AppResult<Vec<Vec<DepthMap>>> {
        Ok(samples.iter().map(|s| vec![s.dense_labels(); self.maps]).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Metrics of the final map `D_K`.
    pub report: MetricReport,
    /// RMSE of every map `D_0..D_K`.
    pub per_map_rmse: Vec<f64>,
}

/// Pools all labeled pixels of `samples`, using their labels as stored.
pub fn evaluate(predictor: &mut dyn Predictor, samples: &[SceneSample], edges: &[f64]) -> AppResult<EvalResult> {
    let mut last = MetricAccumulator::new(edges)?;
    let mut maps: Vec<MetricAccumulator> = Vec::new();
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&SceneSample> = chunk.iter().collect();
        let preds = predictor.predict(&refs)?;
        for (s, per_map) in chunk.iter().zip(&preds) {
            let gt = s.labels();
            if maps.is_empty() {
                maps = (0..per_map.len()).map(|_| MetricAccumulator::new(&[])).collect::<Result<_, _>>()?;
            }
            for (acc, p) in maps.iter_mut().zip(per_map) {
                acc.add(p, &gt)?;
            }
            let Some(final_map) = per_map.last() else {
                return Err(AppError::Usage("predictor returned no depth maps".into()));
            };
            last.add(final_map, &gt)?;
        }
    }
    let per_map_rmse = maps.iter().map(|a| a.finish().map(|r| r.rmse)).collect::<Result<_, _>>()?;
    Ok(EvalResult { report: last.finish()?, per_map_rmse })
}

pub fn metrics_csv(r: &MetricReport) -> String {
    format!("{METRIC_CSV_HEADER}\n{}\n", r.csv_row())
}

pub fn ranges_csv(r: &MetricReport) -> String {
    let mut s = format!("{RANGE_CSV_HEADER}\n");
    r.range_rows().iter().for_each(|row| writeln!(s, "{row}").unwrap());
    s
}

pub fn per_map_csv(rmse: &[f64]) -> String {
    let mut s = String::from("map,rmse\n");
    rmse.iter().enumerate().for_each(|(k, v)| writeln!(s, "{k},{v}").unwrap());
    s
}

/// Default range edges: four equal buckets over the depth range, the last
/// one widened so that `d_max` itself is counted.
pub fn default_edges(d_min: f64, d_max: f64) -> Vec<f64> {
    let mut e: Vec<f64> = (0..=4).map(|i| d_min + (d_max - d_min) * i as f64 / 4.0).collect();
    e[4] = d_max.next_up();
    e
}

/// Evaluates a run directory on the test split of `data` (full-range
/// labels) and writes the three CSVs into `out`.
pub fn eval_run(run: &Path, data: Option<&Path>, edges: Option<&[f64]>, out: &Path) -> AppResult<EvalResult> {
    let (cfg, model, store) = load_run(run)?;
    let data = data.map_or_else(|| cfg.dataset.clone(), Path::to_path_buf);
    let (manifest, samples) = load_split(&data, Split::Test)?;
    let edges = edges.map_or_else(|| default_edges(manifest.scene.d_min, manifest.scene.d_max), <[f64]>::to_vec);
    let result = evaluate(&mut ModelPredictor { model: &model, store: &store }, &samples, &edges)?;
    create_dir(out)?;
    write_text(&out.join(METRICS_CSV), &metrics_csv(&result.report))?;
    write_text(&out.join(RANGES_CSV), &ranges_csv(&result.report))?;
    write_text(&out.join(PER_MAP_CSV), &per_map_csv(&result.per_map_rmse))?;
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub rel_bias: bool,
    pub eval: EvalResult,
    /// Pooled RMSE over labels below and at-or-above `d_clip`.
    pub in_band_rmse: Option<f64>,
    pub out_band_rmse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationVerdict {
    pub pairs: usize,
    /// Seeds where the rel-bias model has the lower out-of-band RMSE.
    pub wins: usize,
    pub median_out_on: f64,
    pub median_out_off: f64,
    pub median_in_on: f64,
    pub median_in_off: f64,
}

impl AblationVerdict {
    pub fn in_band_degradation(&self) -> f64 {
        (self.median_in_on - self.median_in_off) / self.median_in_off
    }

    /// Sign test on at least four of five (or the same fraction of more)
    /// seeds, a lower median out-of-band RMSE, and less than 10 % in-band
    /// degradation.
    pub fn holds(&self) -> bool {
        self.pairs >= 5 && 5 * self.wins >= 4 * self.pairs && self.median_out_on < self.median_out_off && self.in_band_degradation() < 0.10
    }
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn verdict(rows: &[AblationRow]) -> Option<AblationVerdict> {
    let mut on = Vec::new();
    let mut off = Vec::new();
    for r in rows.iter().filter(|r| r.rel_bias) {
        let partner = rows.iter().find(|p| !p.rel_bias && p.seed == r.seed)?;
        on.push((r.in_band_rmse?, r.out_band_rmse?));
        off.push((partner.in_band_rmse?, partner.out_band_rmse?));
    }
    if on.is_empty() {
        return None;
    }
    let wins = on.iter().zip(&off).filter(|(a, b)| a.1 < b.1).count();
    let col = |v: &[(f64, f64)], out: bool| -> f64 { median(&mut v.iter().map(|p| if out { p.1 } else { p.0 }).collect::<Vec<_>>()) };
    Some(AblationVerdict {
        pairs: on.len(),
        wins,
        median_out_on: col(&on, true),
        median_out_off: col(&off, true),
        median_in_on: col(&on, false),
        median_in_off: col(&off, false),
    })
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("seed,rel_bias,{METRIC_CSV_HEADER},in_band_rmse,out_band_rmse\n");
    let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
    for r in rows {
        writeln!(s, "{},{},{},{},{}", r.seed, r.rel_bias, r.eval.report.csv_row(), opt(r.in_band_rmse), opt(r.out_band_rmse)).unwrap();
    }
    s
}

pub fn verdict_text(v: Option<&AblationVerdict>) -> String {
    match v {
        None => "no out-of-band labels: set d_clip below d_max for a trend verdict\n".into(),
        Some(v) => format!(
            "pairs {}\nrel-bias lower out-of-band RMSE on {}/{} seeds\nmedian out-of-band RMSE: rel-bias {:.4}, ablation {:.4}\nmedian in-band RMSE: rel-bias {:.4}, ablation {:.4} ({:+.2}%)\nverdict: {}\n",
            v.pairs,
            v.wins,
            v.pairs,
            v.median_out_on,
            v.median_out_off,
            v.median_in_on,
            v.median_in_off,
            100.0 * v.in_band_degradation(),
            if v.holds() { "rel-bias better out of range" } else { "no consistent advantage" }
        ),
    }
}

/// Trains and evaluates matched rel-bias on/off runs for every seed.
/// `out/seed{s}_{on,off}` hold the runs; `ablation.csv` and `verdict.txt`
/// summarize them.
pub fn ablate(base: &RunConfig, seeds: &[u64], out: &Path, mut progress: impl FnMut(u64, bool, &StepStats)) -> AppResult<(Vec<AblationRow>, Option<AblationVerdict>)> {
    if seeds.is_empty() {
        return Err(AppError::Usage("ablation needs at least one seed".into()));
    }
    create_dir(out)?;
    let mut rows = Vec::with_capacity(2 * seeds.len());
    for &seed in seeds {
        for rel_bias in [true, false] {
            let cfg = RunConfig { seed, rel_bias_enabled: rel_bias, ..base.clone() };
            let dir: PathBuf = out.join(format!("seed{seed}_{}", if rel_bias { "on" } else { "off" }));
            let run = train(&cfg, &dir, |s| progress(seed, rel_bias, s))?;
            let (manifest, samples) = load_split(&cfg.dataset, Split::Test)?;
            let (lo, hi) = (manifest.scene.d_min, manifest.scene.d_max);
            let clip = cfg.d_clip.or(manifest.d_clip).unwrap_or(hi);
            let edges = if clip < hi { vec![lo, clip, hi.next_up()] } else { vec![lo, hi.next_up()] };
            let eval = evaluate(&mut ModelPredictor { model: &run.model, store: &run.store }, &samples, &edges)?;
            let bands = &eval.report.per_range;
            let (in_band_rmse, out_band_rmse) = (bands[0].rmse, bands.get(1).and_then(|b| b.rmse));
            write_text(&dir.join(METRICS_CSV), &metrics_csv(&eval.report))?;
            write_text(&dir.join(RANGES_CSV), &ranges_csv(&eval.report))?;
            write_text(&dir.join(PER_MAP_CSV), &per_map_csv(&eval.per_map_rmse))?;
            rows.push(AblationRow { seed, rel_bias, eval, in_band_rmse, out_band_rmse });
        }
    }
    let v = verdict(&rows);
    write_text(&out.join("ablation.csv"), &ablation_csv(&rows))?;
    write_text(&out.join("verdict.txt"), &verdict_text(v.as_ref()))?;
    Ok((rows, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_order_visits_each_sample_once_per_epoch() {
        let mut o = SampleOrder::new(7, 3);
        let mut first: Vec<usize> = (0..7).map(|p| o.at(p)).collect();
        let mut second: Vec<usize> = (7..14).map(|p| o.at(p)).collect();
        assert_ne!(first, second);
        first.sort();
        second.sort();
        assert_eq!(first, (0..7).collect::<Vec<_>>());
        assert_eq!(second, first);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&mut [3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&mut [4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn default_edges_cover_the_far_plane() {
        let e = default_edges(1.0, 20.0);
        assert_eq!(e.len(), 5);
        assert!(e[4] > 20.0 && e[4] < 20.0 + 1e-9);
    }
}
