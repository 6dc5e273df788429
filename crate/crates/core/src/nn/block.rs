use ndarray::Array4;
use rand::Rng;

use super::{
    relu_backward, relu_forward, BatchNorm, BatchNormCache, Conv2d, ConvCache, Grads, GroupNorm,
    GroupNormCache, Mode, ParamStore,
};
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Group,
    Batch,
    None,
}

#[derive(Debug, Clone)]
enum Norm {
    Group(GroupNorm),
    Batch(BatchNorm),
    None,
}

#[derive(Debug, Clone)]
enum NormCache<T> {
    Group(GroupNormCache<T>),
    Batch(BatchNormCache<T>),
    None,
}

/// `conv3x3 -> norm -> relu`.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: Conv2d,
    norm: Norm,
}

#[derive(Debug, Clone)]
pub struct BlockCache<T> {
    conv: ConvCache<T>,
    norm: NormCache<T>,
    out: Array4<T>,
}

impl<T> BlockCache<T> {
    pub fn output(&self) -> &Array4<T> {
        &self.out
    }
}

impl ConvBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
        norm: NormKind,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        // A bias before a normalization layer is redundant.
        let conv = Conv2d::new(store, &format!("{name}.conv"), cin, cout, 3, stride, 1, norm == NormKind::None, rng);
        let norm = match norm {
            NormKind::Group => Norm::Group(GroupNorm::new(store, &format!("{name}.gn"), cout, groups)),
            NormKind::Batch => Norm::Batch(BatchNorm::new(store, &format!("{name}.bn"), cout)),
            NormKind::None => Norm::None,
        };
        Self { conv, norm }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array4<T>, mode: Mode) -> (Array4<T>, BlockCache<T>) {
        let (y, conv) = self.conv.forward(store, x);
        let (mut y, norm) = match &self.norm {
            Norm::Group(gn) => {
                let (y, c) = gn.forward(store, &y);
                (y, NormCache::Group(c))
            }
            Norm::Batch(bn) => {
                let (y, c) = bn.forward(store, &y, mode);
                (y, NormCache::Batch(c))
            }
            Norm::None => (y, NormCache::None),
        };
        relu_forward(&mut y);
        (
            y.clone(),
            BlockCache {
                conv,
                norm,
                out: y,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &BlockCache<T>,
        mut dy: Array4<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        relu_backward(&cache.out, &mut dy);
        let dy = match (&self.norm, &cache.norm) {
            (Norm::Group(gn), NormCache::Group(c)) => gn.backward(store, c, &dy, grads),
            (Norm::Batch(bn), NormCache::Batch(c)) => bn.backward(store, c, &dy, grads),
            _ => dy,
        };
        self.conv.backward(store, &cache.conv, &dy, grads, need_input_grad)
    }

    /// Folds batch statistics recorded in `cache` into the running estimates.
    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, cache: &BlockCache<T>) {
        if let (Norm::Batch(bn), NormCache::Batch(c)) = (&self.norm, &cache.norm) {
            if let Some((m, v)) = &c.batch_stats {
                bn.update_running(store, m, v);
            }
        }
    }
}
