use ndarray::{s, Array1, Array4, ArrayD, IxDyn};

use super::{Grads, Mode, ParamId, ParamKind, ParamStore};
use crate::Scalar;

const EPS: f64 = 1e-5;

/// Group normalization over `channels / groups` channels and all spatial
/// positions of one sample. Independent of the batch, so each slice of a
/// volume is normalized on its own.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub groups: usize,
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    xhat: Array4<T>,
    /// `[n, group]`
    inv_std: ndarray::Array2<T>,
}

impl GroupNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels.is_multiple_of(groups), "channels must divide into groups");
        let gamma = store.add(
            format!("{name}.gamma"),
            ParamKind::Trainable,
            ArrayD::from_elem(IxDyn(&[channels]), T::one()),
        );
        let beta = store.add(
            format!("{name}.beta"),
            ParamKind::Trainable,
            ArrayD::zeros(IxDyn(&[channels])),
        );
        Self {
            groups,
            channels,
            gamma,
            beta,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Array4<T>) -> (Array4<T>, GroupNormCache<T>) {
        let (c, n, h, w) = x.dim();
        let cpg = c / self.groups;
        let m = T::of((cpg * h * w) as f64);
        let eps = T::of(EPS);
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut xhat = Array4::zeros(x.dim());
        let mut inv_std = ndarray::Array2::zeros((n, self.groups));
        for ni in 0..n {
            for g in 0..self.groups {
                let block = x.slice(s![g * cpg..(g + 1) * cpg, ni, .., ..]);
                let mean = block.iter().copied().sum::<T>() / m;
                let var = block.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / m;
                let is = T::one() / (var + eps).sqrt();
                inv_std[[ni, g]] = is;
                xhat.slice_mut(s![g * cpg..(g + 1) * cpg, ni, .., ..])
                    .zip_mut_with(&block, |o, &v| *o = (v - mean) * is);
            }
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let (gm, bt) = (gamma[[ci]], beta[[ci]]);
            y.slice_mut(s![ci, .., .., ..]).mapv_inplace(|v| v * gm + bt);
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &GroupNormCache<T>,
        dy: &Array4<T>,
        grads: &mut Grads<T>,
    ) -> Array4<T> {
        let (c, n, h, w) = dy.dim();
        let cpg = c / self.groups;
        let m = T::of((cpg * h * w) as f64);
        let gamma = store.get(self.gamma);
        {
            let gg = grads.get_mut(self.gamma);
            for ci in 0..c {
                let a = dy.slice(s![ci, .., .., ..]);
                let b = cache.xhat.slice(s![ci, .., .., ..]);
                gg[[ci]] += a.iter().zip(b.iter()).map(|(&p, &q)| p * q).sum::<T>();
            }
        }
        {
            let gb = grads.get_mut(self.beta);
            for ci in 0..c {
                gb[[ci]] += dy.slice(s![ci, .., .., ..]).iter().copied().sum::<T>();
            }
        }
        let mut dxhat = dy.clone();
        for ci in 0..c {
            let gm = gamma[[ci]];
            dxhat.slice_mut(s![ci, .., .., ..]).mapv_inplace(|v| v * gm);
        }
        let mut dx = Array4::zeros(dy.dim());
        for ni in 0..n {
            for g in 0..self.groups {
                let r = s![g * cpg..(g + 1) * cpg, ni, .., ..];
                let dxh = dxhat.slice(r);
                let xh = cache.xhat.slice(r);
                let sum_d = dxh.iter().copied().sum::<T>();
                let sum_dx = dxh.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
                let is = cache.inv_std[[ni, g]];
                let mut out = dx.slice_mut(r);
                ndarray::Zip::from(&mut out).and(&dxh).and(&xh).for_each(|o, &d, &x| {
                    *o = is / m * (m * d - sum_d - x * sum_dx);
                });
            }
        }
        dx
    }
}

/// Per-channel normalization over `N, H, W` with running estimates for
/// evaluation.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub channels: usize,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormCache<T> {
    xhat: Array4<T>,
    inv_std: Array1<T>,
    /// Batch statistics (mean, unbiased variance) when computed in train mode.
    pub batch_stats: Option<(Array1<T>, Array1<T>)>,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(
            format!("{name}.gamma"),
            ParamKind::Trainable,
            ArrayD::from_elem(IxDyn(&[channels]), T::one()),
        );
        let beta = store.add(
            format!("{name}.beta"),
            ParamKind::Trainable,
            ArrayD::zeros(IxDyn(&[channels])),
        );
        let running_mean = store.add(
            format!("{name}.running_mean"),
            ParamKind::Buffer,
            ArrayD::zeros(IxDyn(&[channels])),
        );
        let running_var = store.add(
            format!("{name}.running_var"),
            ParamKind::Buffer,
            ArrayD::from_elem(IxDyn(&[channels]), T::one()),
        );
        Self {
            channels,
            gamma,
            beta,
            running_mean,
            running_var,
            momentum: 0.1,
        }
    }

    /// Batch statistics are used only in train mode with at least two samples;
    /// otherwise the running estimates are applied and the output of each
    /// sample is independent of its batch mates.
    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
        mode: Mode,
    ) -> (Array4<T>, BatchNormCache<T>) {
        let (c, n, h, w) = x.dim();
        let eps = T::of(EPS);
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let use_batch = mode == Mode::Train && n >= 2;
        let mut xhat = Array4::zeros(x.dim());
        let mut inv_std = Array1::zeros(c);
        let mut stats = use_batch.then(|| (Array1::zeros(c), Array1::zeros(c)));
        let count = n * h * w;
        for ci in 0..c {
            let plane = x.slice(s![ci, .., .., ..]);
            let (mean, var) = if use_batch {
                let m = T::of(count as f64);
                let mean = plane.iter().copied().sum::<T>() / m;
                let ss = plane.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
                if let Some((sm, sv)) = stats.as_mut() {
                    sm[ci] = mean;
                    sv[ci] = if count > 1 { ss / T::of((count - 1) as f64) } else { T::zero() };
                }
                (mean, ss / m)
            } else {
                (store.get(self.running_mean)[[ci]], store.get(self.running_var)[[ci]])
            };
            let is = T::one() / (var + eps).sqrt();
            inv_std[ci] = is;
            xhat.slice_mut(s![ci, .., .., ..])
                .zip_mut_with(&plane, |o, &v| *o = (v - mean) * is);
        }
        let mut y = xhat.clone();
        for ci in 0..c {
            let (gm, bt) = (gamma[[ci]], beta[[ci]]);
            y.slice_mut(s![ci, .., .., ..]).mapv_inplace(|v| v * gm + bt);
        }
        (
            y,
            BatchNormCache {
                xhat,
                inv_std,
                batch_stats: stats,
            },
        )
    }

    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &BatchNormCache<T>,
        dy: &Array4<T>,
        grads: &mut Grads<T>,
    ) -> Array4<T> {
        let (c, n, h, w) = dy.dim();
        let m = T::of((n * h * w) as f64);
        let gamma = store.get(self.gamma);
        let mut dx = Array4::zeros(dy.dim());
        for ci in 0..c {
            let d = dy.slice(s![ci, .., .., ..]);
            let xh = cache.xhat.slice(s![ci, .., .., ..]);
            let sum_d = d.iter().copied().sum::<T>();
            let sum_dx = d.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>();
            grads.get_mut(self.gamma)[[ci]] += sum_dx;
            grads.get_mut(self.beta)[[ci]] += sum_d;
            let gm = gamma[[ci]];
            let is = cache.inv_std[ci];
            let mut out = dx.slice_mut(s![ci, .., .., ..]);
            if cache.batch_stats.is_some() {
                ndarray::Zip::from(&mut out).and(&d).and(&xh).for_each(|o, &g, &x| {
                    *o = gm * is / m * (m * g - sum_d - x * sum_dx);
                });
            } else {
                ndarray::Zip::from(&mut out).and(&d).for_each(|o, &g| *o = gm * is * g);
            }
        }
        dx
    }

    /// Exponential moving average update of the running estimates.
    pub fn update_running<T: Scalar>(&self, store: &mut ParamStore<T>, mean: &Array1<T>, var: &Array1<T>) {
        let mom = T::of(self.momentum);
        let keep = T::one() - mom;
        let rm = store.get_mut(self.running_mean);
        for ci in 0..self.channels {
            rm[[ci]] = keep * rm[[ci]] + mom * mean[ci];
        }
        let rv = store.get_mut(self.running_var);
        for ci in 0..self.channels {
            rv[[ci]] = keep * rv[[ci]] + mom * var[ci];
        }
    }
}
