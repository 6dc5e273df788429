//! Optimization loop, checkpoints, random hyperparameter search and
//! test-time augmentation.

use std::path::Path;
use std::time::Instant;

use ndarray::{ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::augment::{self, AugmentConfig, Transform};
use crate::container::{Container, Payload, Record};
use crate::error::{config_err, Error, Result};
use crate::eval::auc;
use crate::global::{MALIGNANT, NUM_CLASSES};
use crate::model::{Gmic3d, ModelConfig, Prediction, Sample, StepOptions};
use crate::nn::{Adam, AdamState, ParamKind, ParamStore};
use crate::phantom::{Dataset, Volume};
use crate::rng::{stream, stream_seed};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub model: ModelConfig,
    /// Adam step size `η`.
    pub learning_rate: f64,
    /// Saliency L1 weight `β`.
    pub beta: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Number of augmented copies averaged at test time.
    pub tta: usize,
    pub augment: AugmentConfig,
    /// Data-parallel global module; loss accumulation order may differ.
    pub parallel: bool,
    /// Epochs of the auxiliary three-way pretraining of the global backbone (0 = off).
    pub pretrain_epochs: usize,
}

impl TrainConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            learning_rate: 2e-3,
            beta: 1e-4,
            batch_size: 8,
            max_epochs: 12,
            patience: 4,
            seed: 0,
            tta: 10,
            augment: AugmentConfig::default(),
            parallel: false,
            pretrain_epochs: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            learning_rate: 10f64.powf(-5.0),
            beta: 10f64.powf(-5.54),
            batch_size: 4,
            max_epochs: 40,
            patience: 15,
            seed: 0,
            tta: 10,
            augment: AugmentConfig {
                max_shift: 100,
                max_resize: 100,
            },
            parallel: false,
            pretrain_epochs: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return config_err(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return config_err(format!("beta must be positive, got {}", self.beta));
        }
        if self.batch_size == 0 {
            return config_err("batch size must be at least 1");
        }
        if self.patience >= self.max_epochs {
            return config_err(format!("patience {} must be below max epochs {}", self.patience, self.max_epochs));
        }
        if self.tta == 0 {
            return config_err("tta count must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auc_malignant: f64,
    pub mean_saliency: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TrainStatus {
    Completed,
    EarlyStopped { epoch: usize },
    Diverged { epoch: usize, reason: String },
}

/// Restartable training state. The random streams are indexed by
/// `(seed, epoch, ...)`, so `(seed, next_epoch)` fully describes them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub adam: AdamState<T>,
    /// Epochs completed when these parameters were captured.
    pub epoch: usize,
    pub next_epoch: usize,
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub best_metric: Option<f64>,
    pub status: TrainStatus,
}

fn to_payload<T: Scalar>(a: &ArrayD<T>) -> Payload {
    let it = a.as_standard_layout();
    if T::DTYPE == "f32" {
        Payload::F32(it.iter().map(|v| v.to_f32().expect("f32")).collect())
    } else {
        Payload::F64(it.iter().map(|v| v.f64()).collect())
    }
}

fn from_payload<T: Scalar>(r: &Record, path: &Path) -> Result<ArrayD<T>> {
    let fmt = |reason: String| Error::Format {
        path: path.to_path_buf(),
        record: r.name.clone(),
        reason,
    };
    if r.payload.dtype() != T::DTYPE {
        return Err(fmt(format!("stored as {}, requested {}", r.payload.dtype(), T::DTYPE)));
    }
    let data: Vec<T> = match &r.payload {
        Payload::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
        Payload::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        Payload::U8(_) => unreachable!("dtype checked"),
    };
    ArrayD::from_shape_vec(IxDyn(&r.shape), data).map_err(|e| fmt(e.to_string()))
}

impl<T: Scalar> Checkpoint<T> {
    /// Rebuilds the model described by this checkpoint.
    pub fn model(&self) -> Result<Gmic3d<T>> {
        let mut m = Gmic3d::new(self.config.model.clone(), self.config.seed)?;
        m.load_params(&self.params, None)?;
        Ok(m)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(
            "checkpoint",
            json!({
                "dtype": T::DTYPE,
                "epoch": self.epoch,
                "rng": { "seed": self.config.seed, "next_epoch": self.next_epoch },
                "adam_step": self.adam.step,
                "config": self.config,
                "history": self.history,
                "best_metric": self.best_metric,
                "status": self.status,
            }),
        );
        for (i, e) in self.params.entries().iter().enumerate() {
            let kind = match e.kind {
                ParamKind::Trainable => "trainable",
                ParamKind::Buffer => "buffer",
            };
            let shape = e.value.shape().to_vec();
            c.records
                .push(Record::new(format!("param/{}", e.name), shape.clone(), to_payload(&e.value)).with_attr("kind", kind));
            c.records.push(Record::new(format!("adam.m/{}", e.name), shape.clone(), to_payload(&self.adam.m[i])));
            c.records.push(Record::new(format!("adam.v/{}", e.name), shape, to_payload(&self.adam.v[i])));
        }
        c
    }

    pub fn from_container(c: &Container, path: &Path) -> Result<Self> {
        let fmt = |record: &str, reason: String| Error::Format {
            path: path.to_path_buf(),
            record: record.to_string(),
            reason,
        };
        if c.kind != "checkpoint" {
            return Err(fmt("<header>", "container is not a checkpoint".into()));
        }
        fn meta<V: serde::de::DeserializeOwned>(v: Option<&Value>, key: &str, path: &Path) -> Result<V> {
            let v = v.ok_or_else(|| format!("missing `{key}`"));
            v.and_then(|v| serde_json::from_value(v.clone()).map_err(|e| format!("`{key}`: {e}")))
                .map_err(|reason| Error::Format {
                    path: path.to_path_buf(),
                    record: "<header>".into(),
                    reason,
                })
        }
        let m = &c.meta;
        let config: TrainConfig = meta(m.get("config"), "config", path)?;
        let history: Vec<EpochRecord> = meta(m.get("history"), "history", path)?;
        let best_metric: Option<f64> = meta(m.get("best_metric"), "best_metric", path)?;
        let status: TrainStatus = meta(m.get("status"), "status", path)?;
        let epoch: usize = meta(m.get("epoch"), "epoch", path)?;
        let step: u64 = meta(m.get("adam_step"), "adam_step", path)?;
        let next_epoch: usize = meta(m.get("rng").and_then(|r| r.get("next_epoch")), "rng.next_epoch", path)?;

        if !c.records.len().is_multiple_of(3) {
            return Err(fmt("<header>", format!("{} records is not a multiple of 3", c.records.len())));
        }
        let mut params = ParamStore::new();
        let (mut mo, mut vo) = (Vec::new(), Vec::new());
        for chunk in c.records.chunks(3) {
            let p = &chunk[0];
            let Some(name) = p.name.strip_prefix("param/") else {
                return Err(fmt(&p.name, "expected a parameter record".into()));
            };
            let kind = match p.attrs.get("kind").and_then(|k| k.as_str()) {
                Some("trainable") => ParamKind::Trainable,
                Some("buffer") => ParamKind::Buffer,
                _ => return Err(fmt(&p.name, "missing or unknown `kind`".into())),
            };
            for (r, prefix) in [(&chunk[1], "adam.m/"), (&chunk[2], "adam.v/")] {
                if r.name != format!("{prefix}{name}") || r.shape != p.shape {
                    return Err(fmt(&r.name, format!("expected `{prefix}{name}` with shape {:?}", p.shape)));
                }
            }
            params.add(name, kind, from_payload(p, path)?);
            mo.push(from_payload(&chunk[1], path)?);
            vo.push(from_payload(&chunk[2], path)?);
        }
        Ok(Self {
            params,
            adam: AdamState { step, m: mo, v: vo },
            epoch,
            next_epoch,
            config,
            history,
            best_metric,
            status,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?, path)
    }
}

fn check_classes(ds: &Dataset, what: &str) -> Result<()> {
    for c in 0..NUM_CLASSES {
        let pos = ds.volumes.iter().filter(|v| v.labels.get(c)).count();
        if pos == 0 || pos == ds.volumes.len() {
            return config_err(format!("{what} set needs positive and negative examples of class {c}"));
        }
    }
    Ok(())
}

/// Malignant-class AUC of plain forward passes.
pub fn validation_auc<T: Scalar>(model: &Gmic3d<T>, val: &Dataset) -> Result<f64> {
    let scores: Vec<f64> = val
        .volumes
        .par_iter()
        .map(|v| Ok(model.forward(&crate::model::to_scalar(&v.voxels))?.p_final[MALIGNANT].f64()))
        .collect::<Result<_>>()?;
    let labels: Vec<bool> = val.volumes.iter().map(|v| v.labels.malignant).collect();
    auc(&scores, &labels)
}

/// Augmented training sample for `(epoch, index)`. The mask is dropped here:
/// nothing downstream of this point can read it.
pub fn training_sample<T: Scalar>(v: &Volume, cfg: &TrainConfig, epoch: usize, index: usize) -> Sample<T> {
    let mut rng = stream(cfg.seed, &[11, epoch as u64, index as u64]);
    let t = Transform::sample(&cfg.augment, &mut rng);
    Sample {
        voxels: crate::model::to_scalar(&augment::apply_voxels(&v.voxels, &t)),
        labels: v.labels,
        roi_seed: stream_seed(cfg.seed, &[12, epoch as u64, index as u64]),
    }
}

/// Visitation order of the training set in `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, &[10, epoch as u64]));
    order
}

pub struct TrainOutcome<T> {
    /// Best validated state, or the last finite one after divergence.
    pub checkpoint: Checkpoint<T>,
    pub status: TrainStatus,
    pub history: Vec<EpochRecord>,
}

/// Trains from `init` (or a fresh model) and returns the checkpoint with the
/// highest validation malignant AUC.
pub fn train<T: Scalar>(
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    init: Option<Gmic3d<T>>,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    check_classes(train_set, "training")?;
    check_classes(val_set, "validation")?;
    let mut model = match init {
        Some(m) => m,
        None => Gmic3d::new(cfg.model.clone(), cfg.seed)?,
    };
    if cfg.pretrain_epochs > 0 {
        let pre = crate::pretrain::pretrain::<T>(train_set, cfg, cfg.pretrain_epochs)?;
        crate::pretrain::transfer_backbone(&mut model, &pre.model)?;
    }
    let adam = Adam::new(cfg.learning_rate);
    let mut state = AdamState::new(&model.params);
    let mut history = Vec::new();
    let snapshot = |model: &Gmic3d<T>, state: &AdamState<T>, epoch, history: &Vec<EpochRecord>, best, status| Checkpoint {
        params: model.params.clone(),
        adam: state.clone(),
        epoch,
        next_epoch: epoch,
        config: cfg.clone(),
        history: history.clone(),
        best_metric: best,
        status,
    };
    let mut best = snapshot(&model, &state, 0, &history, None, TrainStatus::Completed);
    let mut stale = 0;
    let opts = StepOptions {
        roi_training: true,
        parallel: cfg.parallel,
    };

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let order = epoch_order(cfg.seed, epoch, train_set.len());
        let (mut loss_sum, mut sal_sum, mut count) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<Sample<T>> = chunk
                .iter()
                .map(|&i| training_sample(&train_set.volumes[i], cfg, epoch, i))
                .collect();
            let diverged = |reason: String, best: Checkpoint<T>, history: Vec<EpochRecord>| {
                let status = TrainStatus::Diverged { epoch, reason };
                let mut checkpoint = best;
                checkpoint.status = status.clone();
                Ok(TrainOutcome {
                    checkpoint,
                    status,
                    history,
                })
            };
            let out = match model.loss_and_grads(&batch, cfg.beta, opts) {
                Ok(o) => o,
                Err(Error::NonFinite(msg)) => return diverged(msg, best, history),
                Err(e) => return Err(e),
            };
            if !out.loss.is_finite() || !out.grads.is_finite() {
                return diverged(format!("loss {} at batch starting with volume {}", out.loss, chunk[0]), best, history);
            }
            adam.step(&mut model.params, &out.grads, &mut state);
            model.apply_running_stats(&out);
            if !model.params.is_finite() {
                return diverged("parameters became non-finite".into(), best, history);
            }
            loss_sum += out.loss.f64() * chunk.len() as f64;
            sal_sum += out.traces.iter().map(|t| t.mean_saliency.f64()).sum::<f64>();
            count += chunk.len();
        }
        let val_auc = validation_auc(&model, val_set)?;
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / count as f64,
            val_auc_malignant: val_auc,
            mean_saliency: sal_sum / count as f64,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&rec);
        history.push(rec);
        // Ties go to the later epoch: once the metric saturates, training keeps
        // refining the saliency maps.
        if best.best_metric.is_none_or(|b| val_auc >= b) {
            best = snapshot(&model, &state, epoch + 1, &history, Some(val_auc), TrainStatus::Completed);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience.max(1) {
                let status = TrainStatus::EarlyStopped { epoch: epoch + 1 };
                best.history = history.clone();
                best.next_epoch = epoch + 1;
                best.status = status.clone();
                return Ok(TrainOutcome {
                    checkpoint: best,
                    status,
                    history,
                });
            }
        }
    }
    best.history = history.clone();
    best.next_epoch = cfg.max_epochs;
    Ok(TrainOutcome {
        checkpoint: best,
        status: TrainStatus::Completed,
        history,
    })
}

#[derive(Debug, Clone)]
pub struct TtaPrediction<T> {
    /// Mean of the member `p_final` values.
    pub p_final: [T; 2],
    pub members: Vec<[T; 2]>,
    /// Prediction on the unaugmented input, kept for its saliency and patches.
    pub plain: Prediction<T>,
}

/// Averages `n` predictions on independently augmented copies of `voxels`.
pub fn predict_tta<T: Scalar>(
    model: &Gmic3d<T>,
    voxels: &ndarray::Array3<f32>,
    n: usize,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<TtaPrediction<T>> {
    if n == 0 {
        return config_err("tta count must be at least 1");
    }
    let plain = model.forward(&crate::model::to_scalar(voxels))?;
    let members: Vec<[T; 2]> = (0..n)
        .map(|i| {
            let t = Transform::sample(cfg, &mut stream(seed, &[13, i as u64]));
            if t == Transform::IDENTITY {
                return Ok(plain.p_final);
            }
            Ok(model.forward(&crate::model::to_scalar(&augment::apply_voxels(voxels, &t)))?.p_final)
        })
        .collect::<Result<_>>()?;
    let inv = T::one() / T::of(n as f64);
    let mut p_final = [T::zero(); 2];
    for m in &members {
        for c in 0..2 {
            p_final[c] += m[c];
        }
    }
    for p in &mut p_final {
        *p *= inv;
    }
    Ok(TtaPrediction { p_final, members, plain })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SearchMode {
    TwoD,
    ThreeD,
}

/// Log-uniform / uniform / categorical ranges of the random search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub log10_learning_rate: (f64, f64),
    pub log10_omega: (f64, f64),
    /// Pooling percentage, relative to one slice.
    pub pool_percent: (f64, f64),
    pub num_patches: Vec<usize>,
    pub log10_beta: (f64, f64),
}

impl SearchSpace {
    pub fn paper(mode: SearchMode) -> Self {
        let (pool_percent, num_patches, log10_beta) = match mode {
            SearchMode::TwoD => ((1.0, 25.0), vec![4, 6, 8], (-5.5, -3.5)),
            SearchMode::ThreeD => ((10.97, 274.25), vec![8, 12, 16], (-6.54, -4.54)),
        };
        Self {
            log10_learning_rate: (-5.5, -4.5),
            log10_omega: (-3.0, -2.0),
            pool_percent,
            num_patches,
            log10_beta,
        }
    }

    /// Ranges used for phantom-scale searches.
    pub fn desk() -> Self {
        Self {
            log10_learning_rate: (-3.3, -2.3),
            log10_omega: (-3.0, -2.0),
            pool_percent: (5.0, 40.0),
            num_patches: vec![2, 3, 4],
            log10_beta: (-5.0, -3.0),
        }
    }
}

/// Draws one configuration; fields outside the search space come from `base`.
pub fn sample_hyperparameters<R: Rng + ?Sized>(space: &SearchSpace, base: &TrainConfig, rng: &mut R) -> TrainConfig {
    let uniform = |rng: &mut R, (lo, hi): (f64, f64)| lo + (hi - lo) * rng.gen::<f64>();
    let mut cfg = base.clone();
    cfg.learning_rate = 10f64.powf(uniform(rng, space.log10_learning_rate));
    cfg.model.omega = 10f64.powf(uniform(rng, space.log10_omega));
    cfg.model.pool_percent = uniform(rng, space.pool_percent);
    cfg.model.num_patches = *space.num_patches.choose(rng).expect("non-empty patch choices");
    cfg.beta = 10f64.powf(uniform(rng, space.log10_beta));
    cfg
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trial: usize,
    pub config: TrainConfig,
    pub best_metric: Option<f64>,
    pub status: TrainStatus,
}

pub struct SearchOutcome<T> {
    pub best: TrainOutcome<T>,
    pub best_trial: usize,
    pub trials: Vec<TrialSummary>,
}

/// Random search: `trials` independent runs, best validation AUC wins.
pub fn random_search<T: Scalar>(
    train_set: &Dataset,
    val_set: &Dataset,
    base: &TrainConfig,
    space: &SearchSpace,
    trials: usize,
    on_epoch: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<SearchOutcome<T>> {
    if trials == 0 {
        return config_err("search needs at least one trial");
    }
    let mut best: Option<(usize, TrainOutcome<T>)> = None;
    let mut summaries = Vec::with_capacity(trials);
    for trial in 0..trials {
        let mut cfg = sample_hyperparameters(space, base, &mut stream(base.seed, &[20, trial as u64]));
        cfg.seed = stream_seed(base.seed, &[21, trial as u64]);
        let outcome = train::<T>(train_set, val_set, &cfg, None, &mut |r| on_epoch(trial, r))?;
        let metric = outcome.checkpoint.best_metric;
        summaries.push(TrialSummary {
            trial,
            config: cfg,
            best_metric: metric,
            status: outcome.status.clone(),
        });
        let better = match &best {
            None => true,
            Some((_, b)) => metric.unwrap_or(f64::NEG_INFINITY) > b.checkpoint.best_metric.unwrap_or(f64::NEG_INFINITY),
        };
        if better {
            best = Some((trial, outcome));
        }
    }
    let (best_trial, best) = best.expect("at least one trial");
    Ok(SearchOutcome {
        best,
        best_trial,
        trials: summaries,
    })
}
