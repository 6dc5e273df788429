//! Slice-wise global network, saliency segmentation layer and depth-independent
//! top-t% aggregation.

use ndarray::{s, Array3, Array4, ArrayD, Ix2, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::nn::{BlockCache, ConvBlock, Grads, Mode, NormKind, ParamId, ParamKind, ParamStore};
use crate::Scalar;

pub const BENIGN: usize = 0;
pub const MALIGNANT: usize = 1;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalBackboneConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub norm_groups: usize,
}

impl Default for GlobalBackboneConfig {
    fn default() -> Self {
        Self {
            widths: vec![16, 32, 64, 128],
            strides: vec![2, 2, 2, 2],
            norm_groups: 8,
        }
    }
}

impl GlobalBackboneConfig {
    pub fn downsample(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn hidden_channels(&self) -> usize {
        self.widths.last().copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return config_err("global backbone needs one stride per stage");
        }
        if self.norm_groups == 0 {
            return config_err("norm_groups must be positive");
        }
        if let Some(w) = self.widths.iter().find(|&&w| w % self.norm_groups != 0) {
            return config_err(format!(
                "global width {w} is not divisible by {} normalization groups",
                self.norm_groups
            ));
        }
        if self.strides.contains(&0) {
            return config_err("strides must be positive");
        }
        Ok(())
    }
}

/// Strided `conv -> group norm -> relu` stages shared by every slice.
#[derive(Debug, Clone)]
pub struct GlobalBackbone {
    pub config: GlobalBackboneConfig,
    blocks: Vec<ConvBlock>,
}

impl GlobalBackbone {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, config: &GlobalBackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut cin = 1;
        let blocks = config
            .widths
            .iter()
            .zip(&config.strides)
            .enumerate()
            .map(|(i, (&w, &s))| {
                let b = ConvBlock::new(store, &format!("global.stage{i}"), cin, w, s, NormKind::Group, config.norm_groups, rng);
                cin = w;
                b
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            blocks,
        })
    }

    /// `x`: `[1, D, H, W]`. Returns hidden `[c, D, h, w]` plus per-stage caches.
    /// Slices travel as batch entries and group norm is per sample, so no
    /// information crosses slices.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array4<T>) -> Result<(Array4<T>, Vec<BlockCache<T>>)> {
        if let Some(pos) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("volume voxel at flat index {pos} is not finite")));
        }
        let ds = self.config.downsample();
        let (_, _, h, w) = x.dim();
        if h % ds != 0 || w % ds != 0 {
            return config_err(format!("image {h}x{w} is not divisible by the downsample factor {ds}"));
        }
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = x.clone();
        for b in &self.blocks {
            let (y, c) = b.forward(store, &cur, Mode::Train);
            caches.push(c);
            cur = y;
        }
        Ok((cur, caches))
    }

    pub fn backward<T: Scalar>(&self, store: &ParamStore<T>, caches: &[BlockCache<T>], dh: Array4<T>, grads: &mut Grads<T>) {
        let mut d = dh;
        for (i, (b, c)) in self.blocks.iter().zip(caches).enumerate().rev() {
            match b.backward(store, c, d, grads, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }
}

/// Convenience wrapper: hidden representation of a `[D, H, W]` volume.
pub fn backbone_forward<T: Scalar>(store: &ParamStore<T>, backbone: &GlobalBackbone, voxels: &Array3<T>) -> Result<Array4<T>> {
    let x = voxels.clone().insert_axis(ndarray::Axis(0));
    backbone.forward(store, &x).map(|(h, _)| h)
}

/// `max(0, tanh(x))`; maps into `[0, 1)` with its steepest slope at `0+`.
/// `tanh` rounds to exactly 1 for large inputs, so the result is capped at the
/// largest value below 1.
#[inline]
pub fn relu_tanh<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x.tanh().min(T::one() - T::epsilon() * T::of(0.5))
    } else {
        T::zero()
    }
}

/// Derivative of [`relu_tanh`] given the pre-activation (zero for `x <= 0`).
#[inline]
pub fn relu_tanh_grad<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        let t = x.tanh();
        T::one() - t * t
    } else {
        T::zero()
    }
}

/// 1x1 convolution from hidden channels to the two class logits.
#[derive(Debug, Clone)]
pub struct SegLayerParams {
    /// `[2, c]`
    pub weight: ParamId,
    /// `[2]`
    pub bias: ParamId,
    pub omega: f64,
}

impl SegLayerParams {
    /// Every weight equals `omega > 0`, bias is zero.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, channels: usize, omega: f64) -> Result<Self> {
        if !(omega > 0.0 && omega.is_finite()) {
            return config_err(format!("omega must be positive, got {omega}"));
        }
        let weight = store.add(
            "seg.weight",
            ParamKind::Trainable,
            ArrayD::from_elem(IxDyn(&[NUM_CLASSES, channels]), T::of(omega)),
        );
        let bias = store.add("seg.bias", ParamKind::Trainable, ArrayD::zeros(IxDyn(&[NUM_CLASSES])));
        Ok(Self { weight, bias, omega })
    }
}

/// Per-class saliency `[class, d, i, j]`, every value in `[0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap<T> {
    pub values: Array4<T>,
    /// Full-resolution pixels per grid cell along each spatial axis.
    pub downsample: usize,
}

impl<T: Scalar> SaliencyMap<T> {
    pub fn new(values: Array4<T>, downsample: usize) -> Result<Self> {
        if values.dim().0 != NUM_CLASSES {
            return Err(Error::Shape(format!("saliency needs {NUM_CLASSES} classes, got {}", values.dim().0)));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= T::zero() && **v < T::one())) {
            return Err(Error::Invariant(format!("saliency value {v} outside [0, 1)")));
        }
        Ok(Self { values, downsample })
    }

    /// `(D, h, w)`
    pub fn grid(&self) -> (usize, usize, usize) {
        let (_, d, h, w) = self.values.dim();
        (d, h, w)
    }

    pub fn class(&self, c: usize) -> ndarray::ArrayView3<'_, T> {
        self.values.slice(s![c, .., .., ..])
    }
}

/// Saliency plus the pre-activation logits needed for backpropagation.
#[derive(Debug, Clone)]
pub struct SegmentationOutput<T> {
    pub saliency: SaliencyMap<T>,
    pub logits: Array4<T>,
}

/// `hidden`: `[c, D, h, w]`.
pub fn segmentation_layer<T: Scalar>(
    store: &ParamStore<T>,
    params: &SegLayerParams,
    hidden: &Array4<T>,
    downsample: usize,
) -> Result<SegmentationOutput<T>> {
    let w = store.get(params.weight).view().into_dimensionality::<Ix2>().map_err(|e| Error::Shape(e.to_string()))?;
    let (c, d, h, wd) = hidden.dim();
    if w.dim().1 != c {
        return Err(Error::Shape(format!(
            "segmentation layer expects {} hidden channels, got {c}",
            w.dim().1
        )));
    }
    let b = store.get(params.bias);
    let flat = hidden
        .as_standard_layout()
        .into_owned()
        .into_shape_with_order((c, d * h * wd))
        .expect("contiguous");
    let mut logits = w.dot(&flat);
    for k in 0..NUM_CLASSES {
        let bk = b[[k]];
        logits.row_mut(k).mapv_inplace(|v| v + bk);
    }
    let logits = logits.into_shape_with_order((NUM_CLASSES, d, h, wd)).expect("contiguous");
    let values = logits.mapv(relu_tanh);
    Ok(SegmentationOutput {
        saliency: SaliencyMap::new(values, downsample)?,
        logits,
    })
}

/// Backward of the segmentation layer: `dsal` is dL/dA. Returns dL/dhidden.
pub fn segmentation_backward<T: Scalar>(
    store: &ParamStore<T>,
    params: &SegLayerParams,
    hidden: &Array4<T>,
    logits: &Array4<T>,
    dsal: &Array4<T>,
    grads: &mut Grads<T>,
) -> Array4<T> {
    let (c, d, h, wd) = hidden.dim();
    let n = d * h * wd;
    let dlogit = ndarray::Zip::from(dsal).and(logits).map_collect(|&g, &x| g * relu_tanh_grad(x));
    let dl = dlogit.into_shape_with_order((NUM_CLASSES, n)).expect("contiguous");
    let flat = hidden.as_standard_layout().into_owned().into_shape_with_order((c, n)).expect("contiguous");
    {
        let gw = grads.get_mut(params.weight);
        let mut gw = gw.view_mut().into_dimensionality::<Ix2>().expect("2D");
        gw += &dl.dot(&flat.t());
    }
    {
        let gb = grads.get_mut(params.bias);
        for k in 0..NUM_CLASSES {
            gb[[k]] += dl.row(k).sum();
        }
    }
    let w = store.get(params.weight).view().into_dimensionality::<Ix2>().expect("2D");
    w.t().dot(&dl).into_shape_with_order((c, d, h, wd)).expect("contiguous")
}

/// Number of saliency values pooled per class, defined relative to ONE slice:
/// `max(1, round_half_up(t / 100 * h * w))`. The caller clamps by `h * w * D`.
pub fn pooled_count(t_percent: f64, h: usize, w: usize) -> Result<usize> {
    if !(t_percent > 0.0) || !t_percent.is_finite() {
        return config_err(format!("pooling percentage must be positive, got {t_percent}"));
    }
    let raw = t_percent / 100.0 * (h * w) as f64;
    Ok(((raw + 0.5).floor() as usize).max(1))
}

/// Flat indices (in `(d, i, j)` row-major order) of the `n` largest values;
/// ties go to the lexicographically smallest index.
pub fn top_indices<T: Scalar>(values: &[T], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx.truncate(n.min(values.len()));
    idx
}

/// Top-t% pooling of each class map. Returns the probabilities and the pooled
/// index sets.
pub fn aggregate_with_support<T: Scalar>(saliency: &SaliencyMap<T>, t_percent: f64) -> Result<([T; 2], [Vec<usize>; 2])> {
    let (d, h, w) = saliency.grid();
    let n = pooled_count(t_percent, h, w)?.min(h * w * d);
    let mut p = [T::zero(); 2];
    let mut support: [Vec<usize>; 2] = Default::default();
    for c in 0..NUM_CLASSES {
        let cls = saliency.class(c);
        let cls = cls.as_standard_layout();
        let vals = cls.as_slice().expect("standard layout");
        let top = top_indices(vals, n);
        p[c] = top.iter().map(|&i| vals[i]).sum::<T>() / T::of(top.len() as f64);
        support[c] = top;
    }
    Ok((p, support))
}

pub fn aggregate<T: Scalar>(saliency: &SaliencyMap<T>, t_percent: f64) -> Result<[T; 2]> {
    aggregate_with_support(saliency, t_percent).map(|(p, _)| p)
}
