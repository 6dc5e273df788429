//! High-capacity patch encoder, gated attention pooling and the local head.

use ndarray::{Array1, Array2, Array4, ArrayD, ArrayView1, ArrayView2, Axis, Ix1, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::global::NUM_CLASSES;
use crate::nn::{global_avg_pool, global_avg_pool_backward, BlockCache, ConvBlock, Grads, Mode, NormKind, ParamId, ParamKind, ParamStore};
use crate::scalar::sigmoid;
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalEncoderConfig {
    pub widths: Vec<usize>,
    pub strides: Vec<usize>,
    pub norm: NormKind,
}

impl Default for LocalEncoderConfig {
    fn default() -> Self {
        Self {
            widths: vec![32, 64, 128, 256, 512],
            strides: vec![2, 2, 2, 2, 2],
            norm: NormKind::Batch,
        }
    }
}

impl LocalEncoderConfig {
    /// Length `S` of a patch encoding.
    pub fn encoding_dim(&self) -> usize {
        self.widths.last().copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return config_err("local encoder needs one stride per stage");
        }
        if self.strides.iter().chain(&self.widths).any(|&v| v == 0) {
            return config_err("local encoder widths and strides must be positive");
        }
        Ok(())
    }
}

/// Strided conv stages followed by spatial average pooling.
#[derive(Debug, Clone)]
pub struct LocalEncoder {
    pub config: LocalEncoderConfig,
    blocks: Vec<ConvBlock>,
}

#[derive(Debug, Clone)]
pub struct EncoderCache<T> {
    blocks: Vec<BlockCache<T>>,
    pooled_dims: (usize, usize, usize, usize),
}

impl<T> EncoderCache<T> {
    pub fn outputs(&self) -> impl Iterator<Item = &Array4<T>> {
        self.blocks.iter().map(|b| b.output())
    }
}

impl LocalEncoder {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, config: &LocalEncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut cin = 1;
        let blocks = config
            .widths
            .iter()
            .zip(&config.strides)
            .enumerate()
            .map(|(i, (&w, &s))| {
                let b = ConvBlock::new(store, &format!("local.stage{i}"), cin, w, s, config.norm, 1, rng);
                cin = w;
                b
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            blocks,
        })
    }

    /// `patches`: `[1, N, hc, wc]` -> encodings `[S, N]`.
    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, patches: &Array4<T>, mode: Mode) -> (Array2<T>, EncoderCache<T>) {
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut cur = patches.clone();
        for b in &self.blocks {
            let (y, c) = b.forward(store, &cur, mode);
            caches.push(c);
            cur = y;
        }
        let dims = cur.dim();
        (
            global_avg_pool(&cur),
            EncoderCache {
                blocks: caches,
                pooled_dims: dims,
            },
        )
    }

    pub fn backward<T: Scalar>(&self, store: &ParamStore<T>, cache: &EncoderCache<T>, denc: &Array2<T>, grads: &mut Grads<T>) {
        let mut d = global_avg_pool_backward(denc, cache.pooled_dims);
        for (i, (b, c)) in self.blocks.iter().zip(&cache.blocks).enumerate().rev() {
            match b.backward(store, c, d, grads, i > 0) {
                Some(dx) => d = dx,
                None => break,
            }
        }
    }

    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &EncoderCache<T>) {
        for (b, c) in self.blocks.iter().zip(&cache.blocks) {
            b.update_running(store, c);
        }
    }

    /// Evaluation-mode encoding of a single `hc x wc` patch.
    pub fn encode_patch<T: Scalar>(&self, store: &ParamStore<T>, patch: &Array2<T>, patch_size: usize) -> Result<Array1<T>> {
        if patch.dim() != (patch_size, patch_size) {
            return Err(Error::Shape(format!(
                "patch is {:?}, encoder expects {patch_size}x{patch_size}",
                patch.dim()
            )));
        }
        let x = patch.clone().insert_axis(Axis(0)).insert_axis(Axis(0));
        let (enc, _) = self.forward(store, &x, Mode::Eval);
        Ok(enc.column(0).to_owned())
    }
}

/// Parameters of the gated attention pooling: `w` (L), `V` and `U` (L x S).
#[derive(Debug, Clone)]
pub struct GatedAttentionParams {
    pub w: ParamId,
    pub v: ParamId,
    pub u: ParamId,
    pub hidden: usize,
    pub encoding: usize,
}

impl GatedAttentionParams {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, hidden: usize, encoding: usize, rng: &mut R) -> Self {
        Self::named(store, "attention", hidden, encoding, rng)
    }

    pub fn named<T: Scalar, R: Rng>(store: &mut ParamStore<T>, prefix: &str, hidden: usize, encoding: usize, rng: &mut R) -> Self {
        let mut init = |shape: &[usize], fan_in: usize| {
            let n = Normal::new(0.0, (1.0 / fan_in as f64).sqrt()).expect("valid std");
            ArrayD::from_shape_fn(IxDyn(shape), |_| T::of(n.sample(rng)))
        };
        let v = init(&[hidden, encoding], encoding);
        let u = init(&[hidden, encoding], encoding);
        let w = init(&[hidden], hidden);
        Self {
            w: store.add(format!("{prefix}.w"), ParamKind::Trainable, w),
            v: store.add(format!("{prefix}.V"), ParamKind::Trainable, v),
            u: store.add(format!("{prefix}.U"), ParamKind::Trainable, u),
            hidden,
            encoding,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AttentionOutput<T> {
    pub alpha: Array1<T>,
    pub z: Array1<T>,
    pub logits: Array1<T>,
    tanh_v: Array2<T>,
    sig_u: Array2<T>,
}

fn mat<'a, T: Scalar>(store: &'a ParamStore<T>, id: ParamId) -> ArrayView2<'a, T> {
    store.get(id).view().into_dimensionality::<Ix2>().expect("2D parameter")
}

fn vecv<'a, T: Scalar>(store: &'a ParamStore<T>, id: ParamId) -> ArrayView1<'a, T> {
    store.get(id).view().into_dimensionality::<Ix1>().expect("1D parameter")
}

/// Softmax with max subtraction.
pub fn softmax<T: Scalar>(x: &Array1<T>) -> Array1<T> {
    let m = x.iter().copied().fold(T::neg_infinity(), T::max);
    let e = x.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// `encodings`: `[S, K]`, one column per patch.
pub fn gated_attention<T: Scalar>(store: &ParamStore<T>, params: &GatedAttentionParams, encodings: ArrayView2<'_, T>) -> Result<AttentionOutput<T>> {
    let (s, k) = encodings.dim();
    if k == 0 {
        return Err(Error::Shape("gated attention needs at least one patch".into()));
    }
    if s != params.encoding {
        return Err(Error::Shape(format!("encodings have length {s}, attention expects {}", params.encoding)));
    }
    let tanh_v = mat(store, params.v).dot(&encodings).mapv(|v| v.tanh());
    let sig_u = mat(store, params.u).dot(&encodings).mapv(sigmoid);
    let gated = &tanh_v * &sig_u;
    let logits = vecv(store, params.w).dot(&gated);
    let alpha = softmax(&logits);
    let z = encodings.dot(&alpha);
    Ok(AttentionOutput {
        alpha,
        z,
        logits,
        tanh_v,
        sig_u,
    })
}

/// Returns dL/dencodings `[S, K]` given dL/dz.
pub fn gated_attention_backward<T: Scalar>(
    store: &ParamStore<T>,
    params: &GatedAttentionParams,
    encodings: ArrayView2<'_, T>,
    out: &AttentionOutput<T>,
    dz: &Array1<T>,
    grads: &mut Grads<T>,
) -> Array2<T> {
    let k = encodings.dim().1;
    let dalpha = encodings.t().dot(dz);
    let weighted: T = out.alpha.iter().zip(dalpha.iter()).map(|(&a, &g)| a * g).sum();
    let dlogit = Array1::from_shape_fn(k, |i| out.alpha[i] * (dalpha[i] - weighted));
    let gated = &out.tanh_v * &out.sig_u;
    {
        let gw = grads.get_mut(params.w);
        let mut gw = gw.view_mut().into_dimensionality::<Ix1>().expect("1D");
        gw += &gated.dot(&dlogit);
    }
    let w = vecv(store, params.w);
    // dgated[l, k] = w[l] * dlogit[k]
    let dgated = Array2::from_shape_fn(gated.dim(), |(l, kk)| w[l] * dlogit[kk]);
    let da = ndarray::Zip::from(&dgated)
        .and(&out.tanh_v)
        .and(&out.sig_u)
        .map_collect(|&g, &t, &s| g * s * (T::one() - t * t));
    let db = ndarray::Zip::from(&dgated)
        .and(&out.tanh_v)
        .and(&out.sig_u)
        .map_collect(|&g, &t, &s| g * t * s * (T::one() - s));
    {
        let gv = grads.get_mut(params.v);
        let mut gv = gv.view_mut().into_dimensionality::<Ix2>().expect("2D");
        gv += &da.dot(&encodings.t());
    }
    {
        let gu = grads.get_mut(params.u);
        let mut gu = gu.view_mut().into_dimensionality::<Ix2>().expect("2D");
        gu += &db.dot(&encodings.t());
    }
    let mut denc = mat(store, params.v).t().dot(&da) + mat(store, params.u).t().dot(&db);
    for (mut col, &a) in denc.axis_iter_mut(Axis(1)).zip(out.alpha.iter()) {
        col.scaled_add(a, dz);
    }
    denc
}

/// Class logits `w_local^T z`, stored as a `[2, S]` matrix.
#[derive(Debug, Clone)]
pub struct LocalHead {
    pub weight: ParamId,
}

impl LocalHead {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, encoding: usize, rng: &mut R) -> Self {
        let n = Normal::new(0.0, (1.0 / encoding as f64).sqrt()).expect("valid std");
        let w = ArrayD::from_shape_fn(IxDyn(&[NUM_CLASSES, encoding]), |_| T::of(n.sample(rng)));
        Self {
            weight: store.add("local_head.weight", ParamKind::Trainable, w),
        }
    }
}

/// Per-class logistic of the linear map. Returns `(probabilities, logits)`.
pub fn local_predict<T: Scalar>(store: &ParamStore<T>, head: &LocalHead, z: &Array1<T>) -> Result<([T; 2], [T; 2])> {
    let w = mat(store, head.weight);
    if w.dim().1 != z.len() {
        return Err(Error::Shape(format!("z has length {}, head expects {}", z.len(), w.dim().1)));
    }
    let logits = w.dot(z);
    Ok(([sigmoid(logits[0]), sigmoid(logits[1])], [logits[0], logits[1]]))
}

/// Accumulates head gradients; returns dL/dz. `dlogits` is dL/d(w^T z).
pub fn local_head_backward<T: Scalar>(store: &ParamStore<T>, head: &LocalHead, z: &Array1<T>, dlogits: [T; 2], grads: &mut Grads<T>) -> Array1<T> {
    let g = grads.get_mut(head.weight);
    for c in 0..NUM_CLASSES {
        for (s, &zv) in z.iter().enumerate() {
            g[[c, s]] += dlogits[c] * zv;
        }
    }
    let w = mat(store, head.weight);
    w.row(0).mapv(|v| v * dlogits[0]) + w.row(1).mapv(|v| v * dlogits[1])
}

/// Arithmetic mean of global and local predictions.
pub fn fuse_predictions<T: Scalar>(p_global: [T; 2], p_local: [T; 2]) -> [T; 2] {
    let half = T::of(0.5);
    [(p_global[0] + p_local[0]) * half, (p_global[1] + p_local[1]) * half]
}
