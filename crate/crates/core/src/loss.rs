//! Composite objective: local BCE + global BCE + L1 saliency sparsity, per class.

use crate::error::{Error, Result};
use crate::global::{SaliencyMap, NUM_CLASSES};
use crate::phantom::Labels;
use crate::Scalar;

pub const PROB_FLOOR: f64 = 1e-7;

fn clamp_prob<T: Scalar>(p: T) -> (T, bool) {
    let lo = T::of(PROB_FLOOR);
    let hi = T::one() - lo;
    if p < lo {
        (lo, true)
    } else if p > hi {
        (hi, true)
    } else {
        (p, false)
    }
}

/// Binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce<T: Scalar>(y: bool, p: T) -> T {
    let (p, _) = clamp_prob(p);
    if y {
        -p.ln()
    } else {
        -(T::one() - p).ln()
    }
}

/// d bce / d p; zero where the clamp is active.
pub fn bce_grad<T: Scalar>(y: bool, p: T) -> T {
    let (pc, clamped) = clamp_prob(p);
    if clamped {
        T::zero()
    } else if y {
        -T::one() / pc
    } else {
        T::one() / (T::one() - pc)
    }
}

/// d bce(sigmoid(x)) / dx written as `p - y`; zero where the clamp is active.
pub fn bce_logit_grad<T: Scalar>(y: bool, p: T) -> T {
    let (_, clamped) = clamp_prob(p);
    if clamped {
        T::zero()
    } else if y {
        p - T::one()
    } else {
        p
    }
}

/// L1 norm of one class map.
pub fn saliency_l1<T: Scalar>(saliency: &SaliencyMap<T>, class: usize) -> T {
    saliency.class(class).iter().map(|v| v.abs()).sum()
}

/// `sum_c [bce(y_c, p_local_c) + bce(y_c, p_global_c) + beta * |A_c|_1]`.
/// The two cross-entropies stay separate terms.
pub fn loss<T: Scalar>(y: Labels, p_global: [T; 2], p_local: [T; 2], saliency: &SaliencyMap<T>, beta: T) -> Result<T> {
    if p_global.iter().chain(&p_local).any(|p| p.is_nan()) || beta.is_nan() {
        return Err(Error::NonFinite("NaN prediction passed to the loss".into()));
    }
    let mut total = T::zero();
    for c in 0..NUM_CLASSES {
        let yc = y.get(c);
        total += bce(yc, p_local[c]) + bce(yc, p_global[c]) + beta * saliency_l1(saliency, c);
    }
    Ok(total)
}
