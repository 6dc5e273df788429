//! Model evaluation over a dataset: per-volume predictions, localization
//! scores and the flat metrics report with bootstrap intervals.

use std::collections::BTreeMap;

use ndarray::Axis;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::augment::AugmentConfig;
use crate::error::{Error, Result};
use crate::eval::{self, auc, bootstrap, operating_point, resampled_operating_point, SegScores};
use crate::global::NUM_CLASSES;
use crate::model::Gmic3d;
use crate::phantom::{Dataset, Labels, Volume};
use crate::roi::PatchLocation;
use crate::training::predict_tta;
use crate::Scalar;

pub const CLASS_NAMES: [&str; NUM_CLASSES] = ["benign", "malignant"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub tta: usize,
    pub augment: AugmentConfig,
    pub seed: u64,
    pub bootstrap_iterations: usize,
    pub target_sensitivity: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            tta: 10,
            augment: AugmentConfig::default(),
            seed: 0,
            bootstrap_iterations: 1000,
            target_sensitivity: 0.9,
        }
    }
}

/// Localization scores of one class on one volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeSeg {
    pub volume: SegScores,
    pub projected: SegScores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolumeResult {
    pub index: usize,
    pub group_id: u32,
    pub view_id: u8,
    pub labels: Labels,
    pub p_final: [f64; 2],
    /// Per class; `None` when the volume has no mask or no voxel of that class.
    pub seg: [Option<VolumeSeg>; 2],
    pub patches: Vec<PatchLocation>,
}

/// Saliency upsampled to the image grid, scored against the ground-truth mask.
pub fn volume_seg<T: Scalar>(saliency: &crate::global::SaliencyMap<T>, volume: &Volume) -> Result<[Option<VolumeSeg>; 2]> {
    let Some(mask) = &volume.mask else {
        return Ok([None, None]);
    };
    let mut out = [None, None];
    for (c, slot) in out.iter_mut().enumerate() {
        let truth = mask.index_axis(Axis(0), c).mapv(|v| v > 0);
        if !truth.iter().any(|&t| t) {
            continue;
        }
        let grid = saliency.class(c).mapv(|v| v.f64());
        let full = eval::upsample_nearest(grid.view(), saliency.downsample);
        if full.dim() != truth.dim() {
            return Err(Error::Shape(format!("saliency {:?} vs mask {:?}", full.dim(), truth.dim())));
        }
        let flat_s: Vec<f64> = full.iter().copied().collect();
        let flat_t: Vec<bool> = truth.iter().copied().collect();
        *slot = Some(VolumeSeg {
            volume: eval::seg_scores(&flat_s, &flat_t)?,
            projected: eval::max_project_eval(full.view(), truth.view())?,
        });
    }
    Ok(out)
}

pub fn predict_dataset<T: Scalar>(model: &Gmic3d<T>, ds: &Dataset, opts: &EvalOptions) -> Result<Vec<VolumeResult>> {
    ds.volumes
        .par_iter()
        .enumerate()
        .map(|(i, v)| {
            let pred = predict_tta(model, &v.voxels, opts.tta, &opts.augment, crate::rng::stream_seed(opts.seed, &[i as u64]))?;
            Ok(VolumeResult {
                index: i,
                group_id: v.group_id,
                view_id: v.view_id,
                labels: v.labels,
                p_final: [pred.p_final[0].f64(), pred.p_final[1].f64()],
                seg: volume_seg(&pred.plain.saliency, v)?,
                patches: pred.plain.patches.locations.clone(),
            })
        })
        .collect()
}

/// Per-group mean of the views' scores and the union of their labels, in
/// ascending group order.
pub fn group_scores(results: &[VolumeResult]) -> Vec<(u32, [f64; 2], Labels)> {
    let mut groups: BTreeMap<u32, (Vec<[f64; 2]>, Labels)> = BTreeMap::new();
    for r in results {
        let e = groups.entry(r.group_id).or_insert((Vec::new(), Labels { benign: false, malignant: false }));
        e.0.push(r.p_final);
        e.1.benign |= r.labels.benign;
        e.1.malignant |= r.labels.malignant;
    }
    groups
        .into_iter()
        .map(|(g, (scores, labels))| {
            let n = scores.len() as f64;
            let mean = [0, 1].map(|c| scores.iter().map(|s| s[c]).sum::<f64>() / n);
            (g, mean, labels)
        })
        .collect()
}

/// Flat `key -> value` document; intervals are `[lo, hi]` pairs under `<key>_ci`.
pub type MetricsReport = Map<String, Value>;

/// Every key a report contains (values may be `null` when undefined).
pub fn report_keys() -> Vec<String> {
    let mut keys = vec!["n_images".to_string(), "n_groups".to_string(), "bootstrap_iterations".to_string()];
    for c in CLASS_NAMES {
        for level in ["image", "group"] {
            keys.push(format!("{level}_auc_{c}"));
            keys.push(format!("{level}_auc_{c}_ci"));
            for m in ["specificity", "mcc"] {
                keys.push(format!("{level}_{m}_at_sens_{c}"));
                keys.push(format!("{level}_{m}_at_sens_{c}_ci"));
            }
            keys.push(format!("{level}_threshold_at_sens_{c}"));
            keys.push(format!("{level}_sensitivity_at_sens_{c}"));
        }
        keys.push(format!("segmented_images_{c}"));
        for m in ["dsc", "pxap", "max_proj_dsc", "max_proj_pxap"] {
            keys.push(format!("{m}_{c}"));
            keys.push(format!("{m}_{c}_ci"));
        }
    }
    keys
}

fn num(v: Option<f64>) -> Value {
    v.and_then(serde_json::Number::from_f64).map_or(Value::Null, Value::Number)
}

fn pair(ci: Option<eval::Interval>) -> Value {
    match ci {
        Some(i) => Value::Array(vec![num(Some(i.lo)), num(Some(i.hi))]),
        None => Value::Null,
    }
}

fn classification(report: &mut MetricsReport, level: &str, cname: &str, scores: &[f64], labels: &[bool], opts: &EvalOptions, seed: u64) {
    let n = scores.len();
    let resample = |idx: &[usize]| -> (Vec<f64>, Vec<bool>) { (idx.iter().map(|&i| scores[i]).collect(), idx.iter().map(|&i| labels[i]).collect()) };
    let point_auc = auc(scores, labels).ok();
    let ci_auc = point_auc.and_then(|p| {
        bootstrap(n, opts.bootstrap_iterations, seed, Some(p), |idx| {
            let (s, l) = resample(idx);
            auc(&s, &l).ok()
        })
        .ok()
    });
    report.insert(format!("{level}_auc_{cname}"), num(point_auc));
    report.insert(format!("{level}_auc_{cname}_ci"), pair(ci_auc));

    let op = operating_point(scores, labels, opts.target_sensitivity).ok();
    report.insert(format!("{level}_threshold_at_sens_{cname}"), num(op.map(|o| o.threshold)));
    report.insert(format!("{level}_sensitivity_at_sens_{cname}"), num(op.map(|o| o.sensitivity)));
    let spec = op.and_then(|o| o.specificity);
    let ci_spec = spec.and_then(|p| {
        bootstrap(n, opts.bootstrap_iterations, seed ^ 1, Some(p), |idx| {
            resampled_operating_point(scores, labels, idx, opts.target_sensitivity).and_then(|o| o.specificity)
        })
        .ok()
    });
    report.insert(format!("{level}_specificity_at_sens_{cname}"), num(spec));
    report.insert(format!("{level}_specificity_at_sens_{cname}_ci"), pair(ci_spec));
    let mcc = op.map(|o| o.mcc);
    let ci_mcc = mcc.and_then(|p| {
        bootstrap(n, opts.bootstrap_iterations, seed ^ 2, Some(p), |idx| {
            resampled_operating_point(scores, labels, idx, opts.target_sensitivity).map(|o| o.mcc)
        })
        .ok()
    });
    report.insert(format!("{level}_mcc_at_sens_{cname}"), num(mcc));
    report.insert(format!("{level}_mcc_at_sens_{cname}_ci"), pair(ci_mcc));
}

fn mean_with_ci(report: &mut MetricsReport, key: &str, values: &[f64], opts: &EvalOptions, seed: u64) {
    if values.is_empty() {
        report.insert(key.to_string(), Value::Null);
        report.insert(format!("{key}_ci"), Value::Null);
        return;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let ci = bootstrap(values.len(), opts.bootstrap_iterations, seed, Some(mean), |idx| {
        Some(idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64)
    })
    .ok();
    report.insert(key.to_string(), num(Some(mean)));
    report.insert(format!("{key}_ci"), pair(ci));
}

/// Point estimates and bootstrap intervals. Images are the resampling unit for
/// image-wise and localization metrics, groups for group-wise metrics.
pub fn build_report(results: &[VolumeResult], opts: &EvalOptions) -> MetricsReport {
    let mut report = Map::new();
    let groups = group_scores(results);
    report.insert("n_images".into(), results.len().into());
    report.insert("n_groups".into(), groups.len().into());
    report.insert("bootstrap_iterations".into(), opts.bootstrap_iterations.into());
    for (c, cname) in CLASS_NAMES.iter().enumerate() {
        let seed = crate::rng::stream_seed(opts.seed, &[100 + c as u64]);
        let scores: Vec<f64> = results.iter().map(|r| r.p_final[c]).collect();
        let labels: Vec<bool> = results.iter().map(|r| r.labels.get(c)).collect();
        classification(&mut report, "image", cname, &scores, &labels, opts, seed);
        let gs: Vec<f64> = groups.iter().map(|g| g.1[c]).collect();
        let gl: Vec<bool> = groups.iter().map(|g| g.2.get(c)).collect();
        classification(&mut report, "group", cname, &gs, &gl, opts, seed ^ 0x10);

        let segs: Vec<VolumeSeg> = results.iter().filter_map(|r| r.seg[c]).collect();
        report.insert(format!("segmented_images_{cname}"), segs.len().into());
        let pick = |f: fn(&VolumeSeg) -> f64| segs.iter().map(f).collect::<Vec<f64>>();
        mean_with_ci(&mut report, &format!("dsc_{cname}"), &pick(|s| s.volume.dsc), opts, seed ^ 0x20);
        mean_with_ci(&mut report, &format!("pxap_{cname}"), &pick(|s| s.volume.pxap), opts, seed ^ 0x21);
        mean_with_ci(&mut report, &format!("max_proj_dsc_{cname}"), &pick(|s| s.projected.dsc), opts, seed ^ 0x22);
        mean_with_ci(&mut report, &format!("max_proj_pxap_{cname}"), &pick(|s| s.projected.pxap), opts, seed ^ 0x23);
    }
    report
}

pub struct Evaluation {
    pub report: MetricsReport,
    pub volumes: Vec<VolumeResult>,
}

pub fn evaluate<T: Scalar>(model: &Gmic3d<T>, ds: &Dataset, opts: &EvalOptions) -> Result<Evaluation> {
    let volumes = predict_dataset(model, ds, opts)?;
    Ok(Evaluation {
        report: build_report(&volumes, opts),
        volumes,
    })
}
