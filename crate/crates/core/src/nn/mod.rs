//! Minimal layer library with explicit forward caches and hand-written
//! backward passes. Activations use channel-major `[C, N, H, W]` layout so
//! that a convolution is a single GEMM over the whole batch.

mod adam;
mod block;
mod conv;
mod norm;
mod params;

pub use adam::{Adam, AdamState};
pub use block::{BlockCache, ConvBlock, NormKind};
pub use conv::{Conv2d, ConvCache};
pub use norm::{BatchNorm, BatchNormCache, GroupNorm, GroupNormCache};
pub use params::{Grads, ParamEntry, ParamId, ParamKind, ParamStore};

use ndarray::Array4;

use crate::Scalar;

/// Whether batch-statistics layers use the current batch or running estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub fn relu_forward<T: Scalar>(x: &mut Array4<T>) {
    x.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
}

/// `dy` is masked in place by the sign of the (post-activation) output.
pub fn relu_backward<T: Scalar>(out: &Array4<T>, dy: &mut Array4<T>) {
    ndarray::Zip::from(dy).and(out).for_each(|g, &o| {
        if o <= T::zero() {
            *g = T::zero();
        }
    });
}

/// Spatial mean over `H, W`: `[C, N, H, W] -> [C, N]`.
pub fn global_avg_pool<T: Scalar>(x: &Array4<T>) -> ndarray::Array2<T> {
    let (c, n, h, w) = x.dim();
    let inv = T::one() / T::of((h * w) as f64);
    let mut out = ndarray::Array2::zeros((c, n));
    for ci in 0..c {
        for ni in 0..n {
            let s: T = x.slice(ndarray::s![ci, ni, .., ..]).iter().copied().sum();
            out[[ci, ni]] = s * inv;
        }
    }
    out
}

pub fn global_avg_pool_backward<T: Scalar>(
    dy: &ndarray::Array2<T>,
    dims: (usize, usize, usize, usize),
) -> Array4<T> {
    let (c, n, h, w) = dims;
    let inv = T::one() / T::of((h * w) as f64);
    let mut dx = Array4::zeros(dims);
    for ci in 0..c {
        for ni in 0..n {
            let g = dy[[ci, ni]] * inv;
            dx.slice_mut(ndarray::s![ci, ni, .., ..]).fill(g);
        }
    }
    dx
}
