//! Scale-invariant log loss and the standard depth-estimation metrics.
//!
//! Everything here looks only at valid ground-truth pixels. Predictions are
//! dense; ground truth carries a validity mask.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::numerics::{Graph, Scalar, Var};

#[allow(unused_imports)]
use num_traits::Float as _;

/// Dense depth raster in meters with a validity mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width || valid.len() != values.len() {
            bail!(
                Shape,
                "depth map {height}×{width} with {} values and {} mask bits",
                values.len(),
                valid.len()
            );
        }
        Ok(Self { height, width, values, valid })
    }

    /// Every pixel valid.
    pub fn dense(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(height, width, values, vec![true; n])
    }

    /// Values `> 0` are valid; the on-disk convention for sparse labels.
    pub fn from_sentinel(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let valid = values.iter().map(|&v| v > 0.0).collect();
        Self::new(height, width, values, valid)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Values with invalid pixels replaced by `0.0`.
    pub fn to_sentinel(&self) -> Vec<f64> {
        self.values.iter().zip(&self.valid).map(|(&v, &m)| if m { v } else { 0.0 }).collect()
    }

    fn check_pair(&self, other: &DepthMap) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            bail!(Shape, "depth maps {}×{} and {}×{} differ in size", self.height, self.width, other.height, other.width);
        }
        Ok(())
    }
}

/// Sparse labels on a grid `factor` times coarser.
///
/// A coarse cell is valid when any pixel of its `factor×factor` block is
/// valid; it takes the value of the valid pixel closest to the block centre
/// (first in scan order on ties).
pub fn project_labels(gt: &DepthMap, factor: usize) -> Result<DepthMap> {
    if factor == 0 || gt.height % factor != 0 || gt.width % factor != 0 {
        bail!(Usage, "{}×{} map cannot be reduced by {factor}", gt.height, gt.width);
    }
    let (oh, ow) = (gt.height / factor, gt.width / factor);
    let centre = (factor as f64 - 1.0) / 2.0;
    let mut values = vec![0.0; oh * ow];
    let mut valid = vec![false; oh * ow];
    for cy in 0..oh {
        for cx in 0..ow {
            let mut best: Option<(f64, f64)> = None;
            for dy in 0..factor {
                for dx in 0..factor {
                    let p = (cy * factor + dy) * gt.width + cx * factor + dx;
                    if !gt.valid[p] {
                        continue;
                    }
                    let dist = (dy as f64 - centre).powi(2) + (dx as f64 - centre).powi(2);
                    if best.is_none_or(|(d, _)| dist < d) {
                        best = Some((dist, gt.values[p]));
                    }
                }
            }
            if let Some((_, v)) = best {
                values[cy * ow + cx] = v;
                valid[cy * ow + cx] = true;
            }
        }
    }
    DepthMap::new(oh, ow, values, valid)
}

/// Normalization of the squared-sum term in the scale-invariant loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossForm {
    /// `α·sqrt(mean(h²) − (λ/T)·(Σh)²)`.
    #[default]
    Printed,
    /// `α·sqrt(mean(h²) − (λ/T²)·(Σh)²)`.
    Conventional,
}

impl LossForm {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "printed" => Ok(Self::Printed),
            "conventional" => Ok(Self::Conventional),
            _ => bail!(Usage, "loss form must be `printed` or `conventional`, got `{s}`"),
        }
    }

    fn coupling(self, lambda: f64, t: usize) -> f64 {
        match self {
            Self::Printed => lambda / t as f64,
            Self::Conventional => lambda / (t * t) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    pub lambda: f64,
    pub alpha: f64,
    pub form: LossForm,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { lambda: 0.85, alpha: 10.0, form: LossForm::Printed }
    }
}

/// Radicand of the loss for log residuals `h = ln d* − ln d`.
pub fn si_radicand(h: &[f64], params: &LossParams) -> f64 {
    let t = h.len();
    let sq = h.iter().fold(0.0, |a, &v| a + v * v) / t as f64;
    let s = h.iter().fold(0.0, |a, &v| a + v);
    sq - params.form.coupling(params.lambda, t) * s * s
}

fn log_residuals(pred: &DepthMap, gt: &DepthMap) -> Result<Vec<f64>> {
    pred.check_pair(gt)?;
    let mut h = Vec::new();
    for i in 0..gt.len() {
        if !gt.valid[i] {
            continue;
        }
        let (p, d) = (pred.values[i], gt.values[i]);
        if !(p > 0.0 && d > 0.0 && p.is_finite() && d.is_finite()) {
            bail!(Data, "non-positive depth at valid pixel {i}: pred {p}, label {d}");
        }
        h.push(d.ln() - p.ln());
    }
    if h.is_empty() {
        bail!(UndefinedLoss, "no valid labels");
    }
    Ok(h)
}

/// Scale-invariant loss of one prediction; a non-positive radicand gives 0.
pub fn si_loss_value(pred: &DepthMap, gt: &DepthMap, params: &LossParams) -> Result<f64> {
    let r = si_radicand(&log_residuals(pred, gt)?, params);
    Ok(if r > 0.0 { params.alpha * r.sqrt() } else { 0.0 })
}

/// Differentiable loss of a batch of predictions.
#[derive(Debug, Clone, Copy)]
pub struct SiLoss {
    /// Mean over the samples that carry labels.
    pub loss: Var,
    pub value: f64,
    /// Samples whose radicand was not positive and contributed a constant 0.
    pub clamped: usize,
}

/// Scale-invariant loss of `pred` (any shape holding `B` maps back to back)
/// against `B` label maps. Samples without labels are skipped; a batch with
/// no labels at all is an error.
pub fn si_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, gts: &[DepthMap], params: &LossParams) -> Result<SiLoss> {
    let total = g.value(pred).len();
    let per = gts.first().map_or(0, DepthMap::len);
    if gts.is_empty() || gts.iter().any(|m| m.len() != per) || per * gts.len() != total {
        bail!(Shape, "{} label maps do not tile a prediction of {total} values", gts.len());
    }
    let mut terms = Vec::new();
    let mut clamped = 0;
    for (b, gt) in gts.iter().enumerate() {
        let t = gt.valid_count();
        if t == 0 {
            continue;
        }
        let off = b * per;
        let pv = g.value(pred);
        let mut mask = vec![false; total];
        let mut log_gt = Vec::with_capacity(t);
        for i in 0..per {
            if !gt.valid[i] {
                continue;
            }
            let (p, d) = (pv[off + i].to_f64_lossy(), gt.values[i]);
            if !(p > 0.0 && d > 0.0 && p.is_finite() && d.is_finite()) {
                bail!(Data, "non-positive depth at valid pixel {i} of sample {b}: pred {p}, label {d}");
            }
            mask[off + i] = true;
            log_gt.push(T::from_f64_lossy(d.ln()));
        }
        let sel = g.masked_select(pred, &mask)?;
        let log_p = g.log(sel)?;
        let log_gt = g.constant(&[t], log_gt)?;
        let h = g.sub(log_gt, log_p)?;
        let sq = g.square(h)?;
        let mean_sq = g.mean(sq)?;
        let s = g.sum(h)?;
        let s2 = g.square(s)?;
        let coupled = g.scale(s2, T::from_f64_lossy(params.form.coupling(params.lambda, t)))?;
        let radicand = g.sub(mean_sq, coupled)?;
        if g.scalar_value(radicand) > T::zero() {
            let root = g.sqrt(radicand)?;
            terms.push(g.scale(root, T::from_f64_lossy(params.alpha))?);
        } else {
            clamped += 1;
            terms.push(g.constant(&[1], vec![T::zero()])?);
        }
    }
    if terms.is_empty() {
        bail!(UndefinedLoss, "no valid labels in the batch");
    }
    let stacked = g.concat_last(&terms)?;
    let loss = g.mean(stacked)?;
    let value = g.scalar_value(loss).to_f64_lossy();
    Ok(SiLoss { loss, value, clamped })
}

/// Mean loss over all emitted depth maps.
#[derive(Debug, Clone)]
pub struct TotalLoss {
    pub loss: Var,
    pub value: f64,
    pub per_map: Vec<f64>,
    pub clamped: usize,
}

/// `Σ L_i / (K+1)` over the maps `D_0..D_K`, each a batch prediction.
pub fn total_loss<T: Scalar>(g: &mut Graph<T>, maps: &[Var], gts: &[DepthMap], params: &LossParams) -> Result<TotalLoss> {
    if maps.is_empty() {
        bail!(Usage, "total loss over zero depth maps");
    }
    let mut losses = Vec::with_capacity(maps.len());
    let mut per_map = Vec::with_capacity(maps.len());
    let mut clamped = 0;
    for &m in maps {
        let l = si_loss(g, m, gts, params)?;
        losses.push(l.loss);
        per_map.push(l.value);
        clamped += l.clamped;
    }
    let stacked = g.concat_last(&losses)?;
    let loss = g.mean(stacked)?;
    let value = g.scalar_value(loss).to_f64_lossy();
    Ok(TotalLoss { loss, value, per_map, clamped })
}

pub const METRIC_CSV_HEADER: &str = "abs_rel,rmse,rmse_log,log10,sq_rel,silog,d1,d2,d3";
pub const RANGE_CSV_HEADER: &str = "range_lo,range_hi,rmse,count";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRmse {
    pub lo: f64,
    pub hi: f64,
    /// Absent for an empty bucket.
    pub rmse: Option<f64>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub abs_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub sq_rel: f64,
    pub silog: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub count: usize,
    pub per_range: Vec<RangeRmse>,
}

impl MetricReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.abs_rel, self.rmse, self.rmse_log, self.log10, self.sq_rel, self.silog, self.delta1, self.delta2, self.delta3
        )
    }

    pub fn range_rows(&self) -> Vec<String> {
        self.per_range
            .iter()
            .map(|r| match r.rmse {
                Some(v) => format!("{},{},{},{}", r.lo, r.hi, v, r.count),
                None => format!("{},{},,{}", r.lo, r.hi, r.count),
            })
            .collect()
    }
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 || edges.windows(2).any(|w| !(w[1] > w[0])) || edges.iter().any(|e| !e.is_finite()) {
        bail!(Usage, "range edges must be at least two strictly increasing finite values, got {edges:?}");
    }
    Ok(())
}

/// Running sums for the metrics, so a whole test set can be pooled into
/// one report.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    edges: Vec<f64>,
    n: usize,
    abs_rel: f64,
    sq_err: f64,
    sq_rel: f64,
    sq_log: f64,
    log10: f64,
    sum_d: f64,
    delta: [usize; 3],
    buckets: Vec<(f64, usize)>,
}

impl MetricAccumulator {
    pub fn new(edges: &[f64]) -> Result<Self> {
        if !edges.is_empty() {
            check_edges(edges)?;
        }
        let buckets = vec![(0.0, 0); edges.len().saturating_sub(1)];
        Ok(Self {
            edges: edges.to_vec(),
            n: 0,
            abs_rel: 0.0,
            sq_err: 0.0,
            sq_rel: 0.0,
            sq_log: 0.0,
            log10: 0.0,
            sum_d: 0.0,
            delta: [0; 3],
            buckets,
        })
    }

    /// Adds every valid pixel of one prediction/label pair.
    pub fn add(&mut self, pred: &DepthMap, gt: &DepthMap) -> Result<()> {
        pred.check_pair(gt)?;
        for i in 0..gt.len() {
            if !gt.valid[i] {
                continue;
            }
            let (p, d) = (pred.values[i], gt.values[i]);
            if !(p > 0.0 && p.is_finite()) {
                bail!(Data, "predicted depth {p} at valid pixel {i}");
            }
            if !(d > 0.0 && d.is_finite()) {
                bail!(Data, "label {d} at valid pixel {i}");
            }
            let err = p - d;
            let ld = p.ln() - d.ln();
            self.n += 1;
            self.abs_rel += err.abs() / d;
            self.sq_err += err * err;
            self.sq_rel += err * err / d;
            self.sq_log += ld * ld;
            self.log10 += (p.log10() - d.log10()).abs();
            self.sum_d += ld;
            let ratio = (p / d).max(d / p);
            let mut thr = 1.0;
            for k in 0..3 {
                thr *= 1.25;
                if ratio < thr {
                    self.delta[k] += 1;
                }
            }
            if let Some(b) = self.edges.windows(2).position(|w| d >= w[0] && d < w[1]) {
                self.buckets[b].0 += err * err;
                self.buckets[b].1 += 1;
            }
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricReport> {
        if self.n == 0 {
            bail!(Data, "no valid pixels to evaluate");
        }
        let n = self.n as f64;
        let mean_d = self.sum_d / n;
        let per_range = self
            .edges
            .windows(2)
            .zip(&self.buckets)
            .map(|(w, &(s, c))| RangeRmse { lo: w[0], hi: w[1], rmse: (c > 0).then(|| (s / c as f64).sqrt()), count: c })
            .collect();
        Ok(MetricReport {
            abs_rel: self.abs_rel / n,
            rmse: (self.sq_err / n).sqrt(),
            rmse_log: (self.sq_log / n).sqrt(),
            log10: self.log10 / n,
            sq_rel: self.sq_rel / n,
            silog: self.sq_log / n - mean_d * mean_d,
            delta1: self.delta[0] as f64 / n,
            delta2: self.delta[1] as f64 / n,
            delta3: self.delta[2] as f64 / n,
            count: self.n,
            per_range,
        })
    }
}

/// All metrics for one prediction; `edges` may be empty for no range breakdown.
pub fn metric_report(pred: &DepthMap, gt: &DepthMap, edges: &[f64]) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(edges)?;
    acc.add(pred, gt)?;
    acc.finish()
}

/// RMSE per ground-truth depth bucket `[edge_i, edge_{i+1})`.
pub fn per_range_rmse(pred: &DepthMap, gt: &DepthMap, edges: &[f64]) -> Result<Vec<RangeRmse>> {
    check_edges(edges)?;
    pred.check_pair(gt)?;
    let mut sums = vec![(0.0, 0usize); edges.len() - 1];
    for i in 0..gt.len() {
        if !gt.valid[i] {
            continue;
        }
        let d = gt.values[i];
        if let Some(b) = edges.windows(2).position(|w| d >= w[0] && d < w[1]) {
            let e = pred.values[i] - d;
            sums[b].0 += e * e;
            sums[b].1 += 1;
        }
    }
    Ok(edges
        .windows(2)
        .zip(sums)
        .map(|(w, (s, c))| RangeRmse { lo: w[0], hi: w[1], rmse: (c > 0).then(|| (s / c as f64).sqrt()), count: c })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::f64::consts::E;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    #[test]
    fn projection_takes_nearest_valid() {
        let mut values = vec![0.0; 16];
        let mut valid = vec![false; 16];
        values[0] = 7.0;
        valid[0] = true;
        values[5] = 3.0;
        valid[5] = true;
        let gt = DepthMap::new(4, 4, values, valid).unwrap();
        let p = project_labels(&gt, 4).unwrap();
        assert_eq!((p.values[0], p.valid[0]), (3.0, true));
        let p = project_labels(&gt, 2).unwrap();
        assert_eq!(p.valid, vec![true, false, false, false]);
        assert!(project_labels(&gt, 3).is_err());
    }

    #[test]
    fn loss_hand_cases() {
        let gt = DepthMap::dense(1, 2, vec![1.0, E]).unwrap();
        let pred = DepthMap::dense(1, 2, vec![E, E]).unwrap();
        let printed = LossParams::default();
        close(si_loss_value(&pred, &gt, &printed).unwrap(), 2.73861, 1e-5);
        let conv = LossParams { form: LossForm::Conventional, ..printed };
        close(si_loss_value(&pred, &gt, &conv).unwrap(), 5.36190, 1e-5);
        close(si_loss_value(&gt, &gt, &printed).unwrap(), 0.0, 1e-12);
    }

    #[test]
    fn loss_errors() {
        let gt = DepthMap::new(1, 2, vec![1.0, 2.0], vec![false, false]).unwrap();
        let pred = DepthMap::dense(1, 2, vec![1.0, 1.0]).unwrap();
        assert!(matches!(si_loss_value(&pred, &gt, &LossParams::default()), Err(crate::Error::UndefinedLoss(_))));
        let gt = DepthMap::dense(1, 2, vec![1.0, 2.0]).unwrap();
        let pred = DepthMap::dense(1, 2, vec![1.0, 0.0]).unwrap();
        assert!(matches!(si_loss_value(&pred, &gt, &LossParams::default()), Err(crate::Error::Data(_))));
        assert_eq!(LossForm::parse("conventional").unwrap(), LossForm::Conventional);
        assert!(LossForm::parse("other").is_err());
    }

    #[test]
    fn single_pixel_metrics() {
        let r = metric_report(&DepthMap::dense(1, 1, vec![2.0]).unwrap(), &DepthMap::dense(1, 1, vec![1.0]).unwrap(), &[]).unwrap();
        close(r.abs_rel, 1.0, 1e-12);
        close(r.rmse, 1.0, 1e-12);
        close(r.rmse_log, 0.693_147_180_559_945_3, 1e-12);
        close(r.log10, 0.301_029_995_663_981_2, 1e-12);
        close(r.sq_rel, 1.0, 1e-12);
        assert_eq!(r.silog, 0.0);
        assert_eq!((r.delta1, r.delta2, r.delta3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn range_rmse_examples() {
        let gt = DepthMap::dense(1, 2, vec![5.0, 6.0]).unwrap();
        let pred = DepthMap::dense(1, 2, vec![8.0, 10.0]).unwrap();
        let r = per_range_rmse(&pred, &gt, &[0.0, 10.0, 20.0]).unwrap();
        close(r[0].rmse.unwrap(), 12.5f64.sqrt(), 1e-12);
        assert_eq!((r[1].rmse, r[1].count), (None, 0));
        assert!(per_range_rmse(&pred, &gt, &[1.0, 1.0]).is_err());
        let rep = metric_report(&pred, &gt, &[0.0, 10.0, 20.0]).unwrap();
        assert_eq!(rep.range_rows()[1], "10,20,,0");
    }
}
