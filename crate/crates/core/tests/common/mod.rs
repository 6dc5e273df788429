#![allow(dead_code)]

use gmic3d::model::{Gmic3d, ModelConfig, Sample, StepOptions};
use gmic3d::nn::{NormKind, ParamKind};
use gmic3d::phantom::Labels;
use gmic3d::roi::Zeta;
use gmic3d::global::GlobalBackboneConfig;
use gmic3d::local::LocalEncoderConfig;
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 24x24 slices, downsample 4, 8-pixel patches, K=2, S=8, L=4.
pub fn mini_config() -> ModelConfig {
    ModelConfig {
        global: GlobalBackboneConfig {
            widths: vec![4, 8],
            strides: vec![2, 2],
            norm_groups: 2,
        },
        local: LocalEncoderConfig {
            widths: vec![4, 8],
            strides: vec![2, 2],
            norm: NormKind::Batch,
        },
        attention_hidden: 4,
        patch_size: 8,
        pool_percent: 20.0,
        num_patches: 2,
        zeta: Zeta(1),
        omega: 0.01,
    }
}

/// Model moved away from its symmetric initialization so every parameter
/// group carries a generic, nonzero gradient.
pub fn generic_model(seed: u64) -> Gmic3d<f64> {
    let mut m = Gmic3d::<f64>::new(mini_config(), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfeed);
    for e in m.params.entries_mut() {
        if e.kind != ParamKind::Trainable {
            continue;
        }
        let is_seg = e.name.starts_with("seg.");
        e.value.mapv_inplace(|v| {
            if is_seg {
                0.3 + rng.gen_range(-0.1..0.1)
            } else {
                v + rng.gen_range(-0.1..0.1)
            }
        });
    }
    m
}

pub fn mini_batch(seed: u64) -> Vec<Sample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = [
        Labels { benign: false, malignant: true },
        Labels { benign: true, malignant: false },
    ];
    labels
        .iter()
        .enumerate()
        .map(|(i, &l)| Sample {
            voxels: Array3::from_shape_fn((3, 24, 24), |_| rng.gen_range(0.0..1.0)),
            labels: l,
            roi_seed: i as u64,
        })
        .collect()
}

#[derive(Debug, Default)]
pub struct GroupReport {
    pub name: String,
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_err: f64,
}

/// Central finite differences (five-point stencil) over every trainable scalar, compared with the
/// analytic gradient. Coordinates whose +-eps perturbation changes a discrete
/// decision (top-t set, patch pick, activation pattern) are skipped and counted.
pub fn finite_difference_check(model: &Gmic3d<f64>, batch: &[Sample<f64>], beta: f64, eps: f64) -> Vec<GroupReport> {
    let opts = StepOptions { roi_training: false, parallel: false };
    let base = model.loss_and_grads(batch, beta, opts).unwrap();
    let mut reports = Vec::new();
    let mut m = model.clone();
    for (idx, e) in model.params.entries().iter().enumerate() {
        if e.kind != ParamKind::Trainable {
            continue;
        }
        let mut rep = GroupReport { name: e.name.clone(), ..Default::default() };
        for flat in 0..e.value.len() {
            let orig = e.value.as_slice().unwrap()[flat];
            let eval = |m: &mut Gmic3d<f64>, v: f64| {
                m.params.entries_mut()[idx].value.as_slice_mut().unwrap()[flat] = v;
                m.loss_and_grads(batch, beta, opts).unwrap()
            };
            let points: Vec<_> = [2.0, 1.0, -1.0, -2.0].iter().map(|k| eval(&mut m, orig + k * eps)).collect();
            m.params.entries_mut()[idx].value.as_slice_mut().unwrap()[flat] = orig;
            if points.iter().any(|p| p.signature != base.signature) {
                rep.skipped += 1;
                continue;
            }
            // fourth-order central stencil
            let numeric = (8.0 * (points[1].loss - points[2].loss) - (points[0].loss - points[3].loss)) / (12.0 * eps);
            let analytic = base.grads.tensors[idx].as_slice().unwrap()[flat];
            let denom = analytic.abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic - numeric).abs() / denom;
            if std::env::var("GRAD_DEBUG").is_ok() && rel > 1e-5 {
                eprintln!("{}[{flat}] analytic {analytic:.6e} numeric {numeric:.6e}", e.name);
            }
            rep.max_rel_err = rep.max_rel_err.max(rel);
            rep.checked += 1;
        }
        reports.push(rep);
    }
    reports
}
pub mod oracle;

/// Random per-class saliency `[2, d, h, w]` in `[0, 1)`. With `coarse`, values
/// are multiples of 1/8 so ties are frequent.
pub fn random_saliency<R: Rng>(rng: &mut R, d: usize, h: usize, w: usize, coarse: bool) -> gmic3d::global::SaliencyMap<f64> {
    let values = ndarray::Array4::from_shape_fn((2, d, h, w), |_| {
        if coarse {
            rng.gen_range(0..8) as f64 / 8.0
        } else {
            rng.gen_range(0.0..0.999)
        }
    });
    gmic3d::global::SaliencyMap::new(values, 4).unwrap()
}

/// Splits a saliency map into per-class oracle grids.
pub fn class_grids(s: &gmic3d::global::SaliencyMap<f64>) -> Vec<oracle::Grid> {
    let (d, h, w) = s.grid();
    (0..2)
        .map(|c| oracle::Grid { d, h, w, v: s.class(c).iter().copied().collect() })
        .collect()
}

pub fn to_grid(a: &Array3<f64>) -> oracle::Grid {
    let (d, h, w) = a.dim();
    oracle::Grid { d, h, w, v: a.iter().copied().collect() }
}

/// Random retrieval problem in the small regime: `h, w <= 8`, `D <= 5`,
/// `K <= 3`, `zeta` in {0, 1, 2}.
pub struct RoiCase {
    pub saliency: gmic3d::global::SaliencyMap<f64>,
    pub params: gmic3d::roi::RoiParams,
}

pub fn random_roi_case<R: Rng>(rng: &mut R) -> RoiCase {
    let d = rng.gen_range(1..=5);
    let h = rng.gen_range(1..=8);
    let w = rng.gen_range(1..=8);
    let coarse = rng.gen_bool(0.5);
    let saliency = random_saliency(rng, d, h, w, coarse);
    let params = gmic3d::roi::RoiParams {
        k: rng.gen_range(1..=3),
        zeta: Zeta(rng.gen_range(0..=2)),
        window: (rng.gen_range(1..=h.min(3)), rng.gen_range(1..=w.min(3))),
    };
    RoiCase { saliency, params }
}

/// Small, clearly separable phantom task for training tests: 32x32 slices,
/// one large high-contrast lesion per positive class. Returns `(train, val)`.
pub fn smoke_data(groups: usize) -> (gmic3d::phantom::Dataset, gmic3d::phantom::Dataset) {
    let spec = gmic3d::phantom::PhantomSpec {
        height: [32, 32],
        width: [32, 32],
        depth: [3, 5],
        lesions_per_class: [1, 1],
        radius: [4.0, 6.0],
        z_scale: 0.6,
        benign_contrast: 0.4,
        malignant_contrast: 0.5,
        malignant_irregularity: 0.3,
        benign_prevalence: 0.4,
        malignant_prevalence: 0.5,
        seed: 3,
        ..Default::default()
    };
    gmic3d::phantom::generate_dataset(&spec, groups).unwrap().split_by_group(5)
}

pub fn smoke_config(epochs: usize) -> gmic3d::training::TrainConfig {
    gmic3d::training::TrainConfig {
        model: mini_config(),
        learning_rate: 3e-3,
        beta: 1e-4,
        batch_size: 8,
        max_epochs: epochs,
        patience: epochs - 1,
        seed: 5,
        tta: 1,
        augment: gmic3d::augment::AugmentConfig::IDENTITY,
        parallel: false,
        pretrain_epochs: 0,
    }
}
