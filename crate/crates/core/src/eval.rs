//! Classification and weakly-supervised localization metrics.
//!
//! Scores are `f64`; a sample is predicted positive when `score >= threshold`.

use ndarray::{Array3, ArrayView3, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;
use rand::Rng;

fn undefined<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::UndefinedMetric(msg.into()))
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: {a} scores but {b} labels")));
    }
    Ok(())
}

fn check_scores(scores: &[f64]) -> Result<()> {
    if let Some(v) = scores.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("score {v}")));
    }
    Ok(())
}

/// Mann-Whitney AUC with midranks for ties.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_len(scores.len(), labels.len(), "auc")?;
    check_scores(scores)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return undefined("auc needs both positive and negative samples");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Confusion {
    pub fn at(scores: &[f64], labels: &[bool], threshold: f64) -> Self {
        let mut c = Confusion::default();
        for (&s, &l) in scores.iter().zip(labels) {
            match (s >= threshold, l) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fn_ += 1,
            }
        }
        c
    }

    pub fn sensitivity(&self) -> Option<f64> {
        let p = self.tp + self.fn_;
        (p > 0).then(|| self.tp as f64 / p as f64)
    }

    pub fn specificity(&self) -> Option<f64> {
        let n = self.tn + self.fp;
        (n > 0).then(|| self.tn as f64 / n as f64)
    }

    /// Matthews correlation; 0 when any marginal is empty.
    pub fn mcc(&self) -> f64 {
        let (tp, fp, tn, fn_) = (self.tp as f64, self.fp as f64, self.tn as f64, self.fn_ as f64);
        let den = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
        if den == 0.0 {
            return 0.0;
        }
        (tp * tn - fp * fn_) / den.sqrt()
    }
}

pub fn mcc_at_threshold(scores: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_len(scores.len(), labels.len(), "mcc")?;
    Ok(Confusion::at(scores, labels, threshold).mcc())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: Option<f64>,
    pub mcc: f64,
}

/// Threshold whose sensitivity is closest to `target`. Candidate thresholds are
/// the distinct scores; among equally close candidates the highest threshold wins.
pub fn threshold_at_sensitivity(scores: &[f64], labels: &[bool], target: f64) -> Result<f64> {
    check_len(scores.len(), labels.len(), "threshold")?;
    check_scores(scores)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return undefined("sensitivity needs at least one positive sample");
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut best: Option<(f64, f64)> = None;
    let mut tp = 0usize;
    let mut i = 0;
    while i < order.len() {
        let thr = scores[order[i]];
        while i < order.len() && scores[order[i]] == thr {
            tp += labels[order[i]] as usize;
            i += 1;
        }
        let gap = (tp as f64 / pos as f64 - target).abs();
        if best.is_none_or(|(g, _)| gap < g) {
            best = Some((gap, thr));
        }
    }
    Ok(best.expect("non-empty scores").1)
}

pub fn operating_point(scores: &[f64], labels: &[bool], target: f64) -> Result<OperatingPoint> {
    let threshold = threshold_at_sensitivity(scores, labels, target)?;
    let c = Confusion::at(scores, labels, threshold);
    Ok(OperatingPoint {
        threshold,
        sensitivity: c.sensitivity().expect("positives present"),
        specificity: c.specificity(),
        mcc: c.mcc(),
    })
}

/// `2|A∩B| / (|A|+|B|)`; two empty masks score 1.
pub fn dsc(pred: &[bool], truth: &[bool]) -> Result<f64> {
    check_len(pred.len(), truth.len(), "dsc")?;
    let inter = pred.iter().zip(truth).filter(|(&a, &b)| a && b).count();
    let total = pred.iter().filter(|&&a| a).count() + truth.iter().filter(|&&b| b).count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Groups `(score, truth)` pairs by descending score: `(threshold, positives, count)`.
fn descending_groups(scores: &[f64], truth: &[bool]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut out: Vec<(f64, usize, usize)> = Vec::new();
    for k in order {
        match out.last_mut() {
            Some(g) if g.0 == scores[k] => {
                g.1 += truth[k] as usize;
                g.2 += 1;
            }
            _ => out.push((scores[k], truth[k] as usize, 1)),
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestDsc {
    pub dsc: f64,
    /// `+inf` when predicting nothing is best.
    pub threshold: f64,
}

/// DSC of `saliency >= threshold` at the threshold maximizing it; ties keep the
/// highest threshold.
pub fn best_dsc(saliency: &[f64], truth: &[bool]) -> Result<BestDsc> {
    check_len(saliency.len(), truth.len(), "dsc")?;
    check_scores(saliency)?;
    let npos = truth.iter().filter(|&&t| t).count();
    let mut best = BestDsc {
        dsc: if npos == 0 { 1.0 } else { 0.0 },
        threshold: f64::INFINITY,
    };
    let (mut tp, mut pred) = (0usize, 0usize);
    for (thr, p, n) in descending_groups(saliency, truth) {
        tp += p;
        pred += n;
        let d = 2.0 * tp as f64 / (pred + npos) as f64;
        if d > best.dsc {
            best = BestDsc { dsc: d, threshold: thr };
        }
    }
    Ok(best)
}

/// Step-wise average precision: `Σ (R_k − R_{k−1}) P_k` over distinct thresholds.
pub fn pxap(saliency: &[f64], truth: &[bool]) -> Result<f64> {
    check_len(saliency.len(), truth.len(), "pxap")?;
    check_scores(saliency)?;
    let npos = truth.iter().filter(|&&t| t).count();
    if npos == 0 {
        return undefined("pxap needs at least one positive pixel");
    }
    let (mut tp, mut pred, mut ap) = (0usize, 0usize, 0.0);
    for (_, p, n) in descending_groups(saliency, truth) {
        tp += p;
        pred += n;
        ap += p as f64 / npos as f64 * (tp as f64 / pred as f64);
    }
    Ok(ap)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    pub dsc: f64,
    pub threshold: f64,
    pub pxap: f64,
}

pub fn seg_scores(saliency: &[f64], truth: &[bool]) -> Result<SegScores> {
    let b = best_dsc(saliency, truth)?;
    Ok(SegScores {
        dsc: b.dsc,
        threshold: b.threshold,
        pxap: pxap(saliency, truth)?,
    })
}

/// Repeats every cell of a `[D, h, w]` grid over a `ds x ds` block.
pub fn upsample_nearest(grid: ArrayView3<'_, f64>, ds: usize) -> Array3<f64> {
    let (d, h, w) = grid.dim();
    Array3::from_shape_fn((d, h * ds, w * ds), |(z, y, x)| grid[[z, y / ds, x / ds]])
}

/// Depth-wise maximum `[D, H, W] -> [H, W]` flattened row-major.
pub fn max_project(grid: ArrayView3<'_, f64>) -> Vec<f64> {
    grid.fold_axis(Axis(0), f64::NEG_INFINITY, |&a, &b| a.max(b)).iter().copied().collect()
}

pub fn max_project_mask(mask: ArrayView3<'_, bool>) -> Vec<bool> {
    mask.fold_axis(Axis(0), false, |&a, &b| a || b).iter().copied().collect()
}

/// Projects saliency and truth over depth, then scores in 2D.
pub fn max_project_eval(saliency: ArrayView3<'_, f64>, mask: ArrayView3<'_, bool>) -> Result<SegScores> {
    if saliency.dim() != mask.dim() {
        return Err(Error::Shape(format!("saliency {:?} vs mask {:?}", saliency.dim(), mask.dim())));
    }
    seg_scores(&max_project(saliency), &max_project_mask(mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
    /// Iterations that produced a value.
    pub used: usize,
    /// Iterations rejected as undefined or outside the operating-point tolerance.
    pub discarded: usize,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile bootstrap over `units` resampled with replacement. `stat` returns
/// `None` for iterations that must be discarded. The interval is widened to
/// contain `point` when given.
pub fn bootstrap<F>(units: usize, iterations: usize, seed: u64, point: Option<f64>, stat: F) -> Result<Interval>
where
    F: Fn(&[usize]) -> Option<f64> + Sync,
{
    if units == 0 {
        return undefined("bootstrap over zero units");
    }
    let mut values: Vec<f64> = (0..iterations)
        .into_par_iter()
        .filter_map(|it| {
            let mut rng = stream(seed, &[it as u64]);
            let idx: Vec<usize> = (0..units).map(|_| rng.gen_range(0..units)).collect();
            stat(&idx)
        })
        .collect();
    if values.is_empty() {
        return undefined("every bootstrap iteration was discarded");
    }
    values.sort_by(f64::total_cmp);
    let (mut lo, mut hi) = (quantile(&values, 0.025), quantile(&values, 0.975));
    if let Some(p) = point {
        lo = lo.min(p);
        hi = hi.max(p);
    }
    Ok(Interval {
        lo,
        hi,
        used: values.len(),
        discarded: iterations - values.len(),
    })
}

/// Sensitivity tolerance, in fractions, beyond which a bootstrap iteration's
/// operating point is discarded.
pub const OPERATING_POINT_TOLERANCE: f64 = 0.025;

/// Specificity and MCC at the target sensitivity on a resample, or `None` when
/// the closest achievable sensitivity misses the target by more than the tolerance.
pub fn resampled_operating_point(scores: &[f64], labels: &[bool], idx: &[usize], target: f64) -> Option<OperatingPoint> {
    let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
    let l: Vec<bool> = idx.iter().map(|&i| labels[i]).collect();
    let op = operating_point(&s, &l, target).ok()?;
    ((op.sensitivity - target).abs() <= OPERATING_POINT_TOLERANCE + 1e-12).then_some(op)
}
