use ndarray::{ArrayD, IxDyn};

use super::{Grads, ParamKind, ParamStore};
use crate::Scalar;

/// First/second moment estimates, serialized with checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        let zeros = || {
            store
                .entries()
                .iter()
                .map(|e| ArrayD::zeros(IxDyn(e.value.shape())))
                .collect::<Vec<_>>()
        };
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn step<T: Scalar>(&self, store: &mut ParamStore<T>, grads: &Grads<T>, state: &mut AdamState<T>) {
        state.step += 1;
        let t = state.step as i32;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let c1 = T::one() - T::of(self.beta1.powi(t));
        let c2 = T::one() - T::of(self.beta2.powi(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if entry.kind != ParamKind::Trainable {
                continue;
            }
            let g = &grads.tensors[i];
            let m = &mut state.m[i];
            let v = &mut state.v[i];
            ndarray::Zip::from(&mut entry.value)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let mhat = *m / c1;
                    let vhat = *v / c2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", ParamKind::Trainable, ArrayD::from_elem(IxDyn(&[2]), 3.0));
        let adam = Adam::new(0.1);
        let mut state = AdamState::new(&store);
        for _ in 0..500 {
            let mut g = store.zero_grads();
            let x = store.get(id).clone();
            *g.get_mut(id) = x.mapv(|v| 2.0 * (v - 1.0));
            adam.step(&mut store, &g, &mut state);
        }
        for &v in store.get(id).iter() {
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn buffers_untouched() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("rm", ParamKind::Buffer, ArrayD::from_elem(IxDyn(&[1]), 0.5));
        let mut g = store.zero_grads();
        g.get_mut(id)[[0]] = 10.0;
        let mut st = AdamState::new(&store);
        Adam::new(0.1).step(&mut store, &g, &mut st);
        assert_eq!(store.get(id)[[0]], 0.5);
    }
}
