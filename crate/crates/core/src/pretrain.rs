//! Auxiliary pretraining of the global backbone on a three-way coarse label,
//! and transfer of the pretrained backbone into a full model.
//!
//! Per-slice features are average-pooled, combined across slices with gated
//! attention and classified by a softmax layer.

use ndarray::{Array1, Array2, Array3, Axis, Ix2};
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::global::{GlobalBackbone, GlobalBackboneConfig};
use crate::local::{gated_attention, gated_attention_backward, softmax, GatedAttentionParams};
use crate::model::{to_scalar, Gmic3d};
use crate::nn::{global_avg_pool, global_avg_pool_backward, Adam, AdamState, Grads, ParamId, ParamKind, ParamStore};
use crate::phantom::{Dataset, Labels};
use crate::rng::stream;
use crate::training::{epoch_order, TrainConfig};
use crate::Scalar;

pub const COARSE_CLASSES: usize = 3;

/// 0 = no lesion, 1 = benign only, 2 = malignant present.
pub fn coarse_label(labels: Labels) -> usize {
    match (labels.benign, labels.malignant) {
        (_, true) => 2,
        (true, false) => 1,
        (false, false) => 0,
    }
}

#[derive(Debug, Clone)]
pub struct PretrainModel<T> {
    pub params: ParamStore<T>,
    backbone: GlobalBackbone,
    attention: GatedAttentionParams,
    head_w: ParamId,
    head_b: ParamId,
}

impl<T: Scalar> PretrainModel<T> {
    pub fn new(global: &GlobalBackboneConfig, attention_hidden: usize, seed: u64) -> Result<Self> {
        // Same stream as the full model, so the backbone starts identical.
        let mut rng = stream(seed, &[7]);
        let mut params = ParamStore::new();
        let backbone = GlobalBackbone::new(&mut params, global, &mut rng)?;
        let c = global.hidden_channels();
        let mut rng = stream(seed, &[8]);
        let attention = GatedAttentionParams::named(&mut params, "pretrain.attention", attention_hidden, c, &mut rng);
        let n = Normal::new(0.0, (1.0 / c as f64).sqrt()).expect("valid std");
        let w = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[COARSE_CLASSES, c]), |_| T::of(n.sample(&mut rng)));
        let head_w = params.add("pretrain.head.weight", ParamKind::Trainable, w);
        let head_b = params.add("pretrain.head.bias", ParamKind::Trainable, ndarray::ArrayD::zeros(ndarray::IxDyn(&[COARSE_CLASSES])));
        Ok(Self {
            params,
            backbone,
            attention,
            head_w,
            head_b,
        })
    }

    fn head(&self) -> (ndarray::ArrayView2<'_, T>, ndarray::ArrayView1<'_, T>) {
        (
            self.params.get(self.head_w).view().into_dimensionality::<Ix2>().expect("2D"),
            self.params.get(self.head_b).view().into_dimensionality().expect("1D"),
        )
    }

    /// Class probabilities for one `[D, H, W]` volume.
    pub fn predict(&self, voxels: &Array3<T>) -> Result<Array1<T>> {
        let (hidden, _) = self.backbone.forward(&self.params, &voxels.clone().insert_axis(Axis(0)))?;
        let feats = global_avg_pool(&hidden);
        let att = gated_attention(&self.params, &self.attention, feats.view())?;
        let (w, b) = self.head();
        Ok(softmax(&(w.dot(&att.z) + b)))
    }

    /// Mean cross-entropy over the batch and its gradient.
    pub fn loss_and_grads(&self, batch: &[(Array3<T>, usize)]) -> Result<(T, Grads<T>)> {
        if batch.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let scale = T::one() / T::of(batch.len() as f64);
        let mut grads = self.params.zero_grads();
        let mut loss = T::zero();
        for (voxels, label) in batch {
            let (hidden, caches) = self.backbone.forward(&self.params, &voxels.clone().insert_axis(Axis(0)))?;
            let feats = global_avg_pool(&hidden);
            let att = gated_attention(&self.params, &self.attention, feats.view())?;
            let (w, b) = self.head();
            let p = softmax(&(w.dot(&att.z) + b));
            loss += -p[*label].max(T::of(1e-12)).ln();
            let mut dlogits = p.mapv(|v| v * scale);
            dlogits[*label] -= scale;
            let dz = w.t().dot(&dlogits);
            {
                let gw = grads.get_mut(self.head_w);
                let outer = dlogits.view().insert_axis(Axis(1)).dot(&att.z.view().insert_axis(Axis(0)));
                *gw += &outer.into_dyn();
            }
            *grads.get_mut(self.head_b) += &dlogits.into_dyn();
            let dfeats: Array2<T> = gated_attention_backward(&self.params, &self.attention, feats.view(), &att, &dz, &mut grads);
            let dhidden = global_avg_pool_backward(&dfeats, hidden.dim());
            self.backbone.backward(&self.params, &caches, dhidden, &mut grads);
        }
        Ok((loss * scale, grads))
    }
}

pub struct PretrainOutcome<T> {
    pub model: PretrainModel<T>,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

/// Trains the auxiliary model for `epochs` with the schedule of `cfg`.
pub fn pretrain<T: Scalar>(ds: &Dataset, cfg: &TrainConfig, epochs: usize) -> Result<PretrainOutcome<T>> {
    let mut model = PretrainModel::new(&cfg.model.global, cfg.model.attention_hidden, cfg.seed)?;
    let adam = Adam::new(cfg.learning_rate);
    let mut state = AdamState::new(&model.params);
    let mut losses = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        let order = epoch_order(cfg.seed ^ 0x5052_4554, epoch, ds.len());
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(Array3<T>, usize)> = chunk
                .iter()
                .map(|&i| {
                    let v = &ds.volumes[i];
                    (to_scalar(&v.voxels), coarse_label(v.labels))
                })
                .collect();
            let (loss, grads) = model.loss_and_grads(&batch)?;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(Error::Diverged {
                    epoch: epoch + 1,
                    reason: format!("pretraining loss {loss}"),
                });
            }
            adam.step(&mut model.params, &grads, &mut state);
            sum += loss.f64() * chunk.len() as f64;
        }
        losses.push(sum / ds.len().max(1) as f64);
    }
    Ok(PretrainOutcome { model, losses })
}

/// Copies every `global.*` tensor of the pretrained model into `target`.
pub fn transfer_backbone<T: Scalar>(target: &mut Gmic3d<T>, source: &PretrainModel<T>) -> Result<usize> {
    target.load_params(&source.params, Some("global."))
}
