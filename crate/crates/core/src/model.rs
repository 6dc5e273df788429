//! The assembled two-stage classifier.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use ndarray::{s, Array2, Array3, Array4, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::global::{
    aggregate_with_support, pooled_count, segmentation_backward, segmentation_layer, GlobalBackbone,
    GlobalBackboneConfig, SaliencyMap, SegLayerParams, NUM_CLASSES,
};
use crate::local::{
    fuse_predictions, gated_attention, gated_attention_backward, local_head_backward, local_predict,
    GatedAttentionParams, LocalEncoder, LocalEncoderConfig, LocalHead,
};
use crate::loss::{bce, bce_grad, bce_logit_grad};
use crate::nn::{Grads, Mode, NormKind, ParamStore};
use crate::phantom::{Labels, Volume};
use crate::rng::stream;
use crate::roi::{extract_patches, window_cells, PatchSet, RoiParams, Zeta};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub global: GlobalBackboneConfig,
    pub local: LocalEncoderConfig,
    /// Attention hidden size `L`.
    pub attention_hidden: usize,
    /// Side of the square patches, full-resolution pixels.
    pub patch_size: usize,
    /// Pooling percentage `t`, relative to one slice.
    pub pool_percent: f64,
    /// Number of patches `K`.
    pub num_patches: usize,
    pub zeta: Zeta,
    /// Constant initial weight of the segmentation layer.
    pub omega: f64,
}

impl ModelConfig {
    /// Commodity-hardware geometry: 96x96 slices, downsample 8, 32-pixel patches.
    pub fn desk() -> Self {
        Self {
            global: GlobalBackboneConfig {
                widths: vec![8, 16, 32, 32],
                strides: vec![2, 2, 2, 1],
                norm_groups: 8,
            },
            local: LocalEncoderConfig {
                widths: vec![16, 32, 64],
                strides: vec![2, 2, 2],
                norm: NormKind::Batch,
            },
            attention_hidden: 16,
            patch_size: 32,
            pool_percent: 10.0,
            num_patches: 3,
            zeta: Zeta(2),
            omega: 0.01,
        }
    }

    /// Full-size constants: 256-pixel patches, `L = 128`, `S = 512`.
    pub fn paper() -> Self {
        Self {
            global: GlobalBackboneConfig {
                widths: vec![16, 32, 64, 128, 256],
                strides: vec![2, 2, 2, 2, 2],
                norm_groups: 8,
            },
            local: LocalEncoderConfig::default(),
            attention_hidden: 128,
            patch_size: 256,
            pool_percent: 100.0,
            num_patches: 8,
            zeta: Zeta(10),
            omega: 0.005,
        }
    }

    pub fn encoding_dim(&self) -> usize {
        self.local.encoding_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.global.validate()?;
        self.local.validate()?;
        pooled_count(self.pool_percent, 1, 1)?;
        if self.num_patches == 0 {
            return config_err("num_patches must be at least 1");
        }
        if self.patch_size == 0 || self.attention_hidden == 0 {
            return config_err("patch_size and attention_hidden must be positive");
        }
        if !(self.omega > 0.0) {
            return config_err("omega must be positive");
        }
        Ok(())
    }

    pub fn roi_params(&self) -> RoiParams {
        let w = window_cells(self.patch_size, self.global.downsample());
        RoiParams {
            k: self.num_patches,
            zeta: self.zeta,
            window: (w, w),
        }
    }
}

/// Model input for one training step. Holds no ground-truth mask.
#[derive(Debug, Clone)]
pub struct Sample<T> {
    pub voxels: Array3<T>,
    pub labels: Labels,
    /// Seed of the patch-jitter stream.
    pub roi_seed: u64,
}

impl<T: Scalar> Sample<T> {
    pub fn from_volume(v: &Volume, roi_seed: u64) -> Self {
        Self {
            voxels: to_scalar(&v.voxels),
            labels: v.labels,
            roi_seed,
        }
    }
}

pub fn to_scalar<T: Scalar>(v: &Array3<f32>) -> Array3<T> {
    v.mapv(|x| T::of(x as f64))
}

#[derive(Debug, Clone, Copy)]
pub struct StepOptions {
    /// Slice jitter in patch retrieval.
    pub roi_training: bool,
    /// Evaluate volumes with rayon and reduce gradients in arbitrary order.
    pub parallel: bool,
}

#[derive(Debug, Clone)]
pub struct SampleTrace<T> {
    pub p_global: [T; 2],
    pub p_local: [T; 2],
    pub mean_saliency: T,
    pub patches: usize,
}

#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    /// Mean composite loss over the batch.
    pub loss: T,
    pub grads: Grads<T>,
    pub traces: Vec<SampleTrace<T>>,
    /// Hash of every discrete decision (top-t sets, patch picks, ReLU
    /// patterns); equal signatures mean the loss is smooth between two points.
    pub signature: u64,
    encoder_cache: Option<crate::local::EncoderCache<T>>,
}

#[derive(Debug, Clone)]
pub struct Prediction<T> {
    pub p_global: [T; 2],
    pub p_local: [T; 2],
    pub p_final: [T; 2],
    pub saliency: SaliencyMap<T>,
    pub patches: PatchSet<T>,
    pub attention: Vec<T>,
}

struct GlobalPart<T> {
    loss: T,
    grads: Grads<T>,
    patches: PatchSet<T>,
    p_global: [T; 2],
    mean_saliency: T,
    signature: u64,
}

#[derive(Debug, Clone)]
pub struct Gmic3d<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    global: GlobalBackbone,
    seg: SegLayerParams,
    local: LocalEncoder,
    attention: GatedAttentionParams,
    head: LocalHead,
}

fn hash_signs<T: Scalar, H: Hasher>(h: &mut H, a: &Array4<T>) {
    let mut word = 0u64;
    for (i, v) in a.iter().enumerate() {
        if *v > T::zero() {
            word ^= 1u64.rotate_left((i % 64) as u32);
        }
        if i % 64 == 63 {
            word.hash(h);
            word = 0;
        }
    }
    word.hash(h);
}

impl<T: Scalar> Gmic3d<T> {
    /// Random initialization from `seed`; the segmentation layer starts at the constant `omega`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, &[7]);
        let mut params = ParamStore::new();
        let global = GlobalBackbone::new(&mut params, &config.global, &mut rng)?;
        let seg = SegLayerParams::new(&mut params, config.global.hidden_channels(), config.omega)?;
        let local = LocalEncoder::new(&mut params, &config.local, &mut rng)?;
        let s = config.encoding_dim();
        let attention = GatedAttentionParams::new(&mut params, config.attention_hidden, s, &mut rng);
        let head = LocalHead::new(&mut params, s, &mut rng);
        Ok(Self {
            config,
            params,
            global,
            seg,
            local,
            attention,
            head,
        })
    }

    pub fn global_backbone(&self) -> &GlobalBackbone {
        &self.global
    }

    pub fn seg_params(&self) -> &SegLayerParams {
        &self.seg
    }

    pub fn local_encoder(&self) -> &LocalEncoder {
        &self.local
    }

    pub fn attention_params(&self) -> &GatedAttentionParams {
        &self.attention
    }

    pub fn local_head(&self) -> &LocalHead {
        &self.head
    }

    /// Replaces parameter values by name (checkpoint restore / transfer).
    /// Returns how many tensors were copied.
    pub fn load_params(&mut self, other: &ParamStore<T>, prefix: Option<&str>) -> Result<usize> {
        let mut copied = 0;
        for e in other.entries() {
            if prefix.is_some_and(|p| !e.name.starts_with(p)) {
                continue;
            }
            let Some(id) = self.params.find(&e.name) else {
                if prefix.is_some() {
                    continue;
                }
                return Err(Error::Shape(format!("unknown parameter `{}`", e.name)));
            };
            let dst = self.params.get_mut(id);
            if dst.shape() != e.value.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    e.name,
                    e.value.shape(),
                    dst.shape()
                )));
            }
            dst.assign(&e.value);
            copied += 1;
        }
        Ok(copied)
    }

    fn check_input(&self, voxels: &Array3<T>) -> Result<()> {
        let (d, h, w) = voxels.dim();
        if d == 0 {
            return Err(Error::Shape("volume has no slices".into()));
        }
        if self.config.patch_size > h || self.config.patch_size > w {
            return config_err(format!("patch size {} exceeds the {h}x{w} image", self.config.patch_size));
        }
        Ok(())
    }

    /// Hidden `[c, D, h, w]` and saliency for a `[D, H, W]` volume.
    pub fn saliency(&self, voxels: &Array3<T>) -> Result<SaliencyMap<T>> {
        self.check_input(voxels)?;
        let x = voxels.clone().insert_axis(Axis(0));
        let (hidden, _) = self.global.forward(&self.params, &x)?;
        Ok(segmentation_layer(&self.params, &self.seg, &hidden, self.config.global.downsample())?.saliency)
    }

    /// Deterministic inference: no slice jitter, running statistics in the encoder.
    pub fn forward(&self, voxels: &Array3<T>) -> Result<Prediction<T>> {
        let saliency = self.saliency(voxels)?;
        let (p_global, _) = aggregate_with_support(&saliency, self.config.pool_percent)?;
        let mut unused = stream(0, &[]);
        let patches = extract_patches(voxels, &saliency, &self.config.roi_params(), self.config.patch_size, false, &mut unused)?;
        let batch = stack_patches(&patches, self.config.patch_size);
        let (enc, _) = self.local.forward(&self.params, &batch, Mode::Eval);
        let att = gated_attention(&self.params, &self.attention, enc.view())?;
        let (p_local, _) = local_predict(&self.params, &self.head, &att.z)?;
        Ok(Prediction {
            p_global,
            p_local,
            p_final: fuse_predictions(p_global, p_local),
            saliency,
            patches,
            attention: att.alpha.to_vec(),
        })
    }

    fn global_part(&self, sample: &Sample<T>, beta: T, scale: T, roi_training: bool) -> Result<GlobalPart<T>> {
        self.check_input(&sample.voxels)?;
        let x = sample.voxels.clone().insert_axis(Axis(0));
        let (hidden, caches) = self.global.forward(&self.params, &x)?;
        let seg = segmentation_layer(&self.params, &self.seg, &hidden, self.config.global.downsample())?;
        let (p_global, support) = aggregate_with_support(&seg.saliency, self.config.pool_percent)?;
        let sal = &seg.saliency.values;
        let mut loss = T::zero();
        let mut dsal = Array4::from_elem(sal.dim(), beta * scale);
        for c in 0..NUM_CLASSES {
            let y = sample.labels.get(c);
            loss += bce(y, p_global[c]) + beta * sal.slice(s![c, .., .., ..]).iter().map(|v| v.abs()).sum::<T>();
            let g = bce_grad(y, p_global[c]) * scale / T::of(support[c].len() as f64);
            let mut cls = dsal.slice_mut(s![c, .., .., ..]);
            let flat = cls.as_slice_mut().expect("contiguous");
            for &i in &support[c] {
                flat[i] += g;
            }
        }
        let mut grads = self.params.zero_grads();
        let dhidden = segmentation_backward(&self.params, &self.seg, &hidden, &seg.logits, &dsal, &mut grads);
        self.global.backward(&self.params, &caches, dhidden, &mut grads);

        let mut rng = stream(sample.roi_seed, &[3]);
        let patches = extract_patches(
            &sample.voxels,
            &seg.saliency,
            &self.config.roi_params(),
            self.config.patch_size,
            roi_training,
            &mut rng,
        )?;

        let mut h = DefaultHasher::new();
        support.hash(&mut h);
        for p in &patches.picks {
            (p.picked_d, p.d, p.i, p.j).hash(&mut h);
        }
        for c in &caches {
            hash_signs(&mut h, c.output());
        }
        hash_signs(&mut h, &seg.logits);

        let n = T::of(sal.len() as f64);
        Ok(GlobalPart {
            loss,
            grads,
            patches,
            p_global,
            mean_saliency: sal.iter().copied().sum::<T>() / n,
            signature: h.finish(),
        })
    }

    /// Mean composite loss over `batch` and its gradient with respect to every
    /// trainable parameter. Patch locations are treated as constants.
    pub fn loss_and_grads(&self, batch: &[Sample<T>], beta: f64, opts: StepOptions) -> Result<StepOutput<T>> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let beta = T::of(beta);
        let scale = T::one() / T::of(batch.len() as f64);
        let parts: Vec<GlobalPart<T>> = if opts.parallel {
            batch
                .par_iter()
                .map(|s| self.global_part(s, beta, scale, opts.roi_training))
                .collect::<Result<_>>()?
        } else {
            batch
                .iter()
                .map(|s| self.global_part(s, beta, scale, opts.roi_training))
                .collect::<Result<_>>()?
        };

        // Encoder runs on every patch of the batch at once so that batch
        // statistics are shared across all volumes.
        let p = self.config.patch_size;
        let total: usize = parts.iter().map(|g| g.patches.len()).sum();
        let mut stacked = Array4::zeros((1, total, p, p));
        let mut off = 0;
        for g in &parts {
            for patch in &g.patches.patches {
                stacked.slice_mut(s![0, off, .., ..]).assign(patch);
                off += 1;
            }
        }
        let (enc, ecache) = self.local.forward(&self.params, &stacked, Mode::Train);
        let mut denc = Array2::zeros(enc.dim());
        let mut local_grads = self.params.zero_grads();
        let mut traces = Vec::with_capacity(parts.len());
        let mut loss = T::zero();
        let mut h = DefaultHasher::new();
        let mut off = 0;
        for (g, sample) in parts.iter().zip(batch) {
            let k = g.patches.len();
            let view = enc.slice(s![.., off..off + k]);
            let att = gated_attention(&self.params, &self.attention, view)?;
            let (p_local, _) = local_predict(&self.params, &self.head, &att.z)?;
            let mut dlogits = [T::zero(); 2];
            let mut ll = T::zero();
            for c in 0..NUM_CLASSES {
                let y = sample.labels.get(c);
                ll += bce(y, p_local[c]);
                dlogits[c] = bce_logit_grad(y, p_local[c]) * scale;
            }
            let dz = local_head_backward(&self.params, &self.head, &att.z, dlogits, &mut local_grads);
            let d = gated_attention_backward(&self.params, &self.attention, view, &att, &dz, &mut local_grads);
            denc.slice_mut(s![.., off..off + k]).assign(&d);
            off += k;
            loss += g.loss + ll;
            g.signature.hash(&mut h);
            traces.push(SampleTrace {
                p_global: g.p_global,
                p_local,
                mean_saliency: g.mean_saliency,
                patches: k,
            });
        }
        self.local.backward(&self.params, &ecache, &denc, &mut local_grads);
        ecache.hash_signs(&mut h);

        let mut grads = if opts.parallel {
            parts
                .into_par_iter()
                .map(|g| g.grads)
                .reduce_with(|mut a, b| {
                    a.accumulate(&b);
                    a
                })
                .expect("non-empty batch")
        } else {
            let mut it = parts.into_iter();
            let mut acc = it.next().expect("non-empty batch").grads;
            for g in it {
                acc.accumulate(&g.grads);
            }
            acc
        };
        grads.accumulate(&local_grads);
        Ok(StepOutput {
            loss: loss * scale,
            grads,
            traces,
            signature: h.finish(),
            encoder_cache: Some(ecache),
        })
    }

    /// Folds the batch statistics of a training step into the running estimates.
    pub fn apply_running_stats(&mut self, out: &StepOutput<T>) {
        if let Some(c) = &out.encoder_cache {
            self.local.update_running(&mut self.params, c);
        }
    }
}

fn stack_patches<T: Scalar>(patches: &PatchSet<T>, p: usize) -> Array4<T> {
    let mut out = Array4::zeros((1, patches.len(), p, p));
    for (i, patch) in patches.patches.iter().enumerate() {
        out.slice_mut(s![0, i, .., ..]).assign(patch);
    }
    out
}

impl<T: Scalar> crate::local::EncoderCache<T> {
    fn hash_signs<H: Hasher>(&self, h: &mut H) {
        for o in self.outputs() {
            hash_signs(h, o);
        }
    }
}
