use ndarray::{Array2, Array4, ArrayD, Ix2, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Grads, ParamId, ParamKind, ParamStore};
use crate::Scalar;

/// Square-kernel 2D convolution lowered to im2col + GEMM.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Array2<T>,
    input_dims: (usize, usize, usize, usize),
}

impl Conv2d {
    /// Registers a He-initialized kernel stored as `[out, in * k * k]`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel * kernel;
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = ArrayD::from_shape_fn(IxDyn(&[out_channels, fan_in]), |_| {
            T::of(normal.sample(rng))
        });
        let weight = store.add(format!("{name}.weight"), ParamKind::Trainable, w);
        let bias = bias.then(|| {
            store.add(
                format!("{name}.bias"),
                ParamKind::Trainable,
                ArrayD::zeros(IxDyn(&[out_channels])),
            )
        });
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn weight_matrix<'a, T: Scalar>(&self, store: &'a ParamStore<T>) -> ndarray::ArrayView2<'a, T> {
        store
            .get(self.weight)
            .view()
            .into_dimensionality::<Ix2>()
            .expect("conv weight is 2D")
    }

    pub fn forward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        x: &Array4<T>,
    ) -> (Array4<T>, ConvCache<T>) {
        let (c, n, h, w) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (oh, ow) = self.output_hw(h, w);
        let cols = self.im2col(x, oh, ow);
        let out = self.weight_matrix(store).dot(&cols);
        let mut out = out
            .into_shape_with_order((self.out_channels, n, oh, ow))
            .expect("gemm output is contiguous");
        if let Some(b) = self.bias {
            let b = store.get(b);
            for (co, mut plane) in out.outer_iter_mut().enumerate() {
                let bv = b[[co]];
                plane.mapv_inplace(|v| v + bv);
            }
        }
        (
            out,
            ConvCache {
                cols,
                input_dims: (c, n, h, w),
            },
        )
    }

    /// Accumulates kernel/bias gradients; returns `dx` only when `need_input_grad`.
    pub fn backward<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        cache: &ConvCache<T>,
        dy: &Array4<T>,
        grads: &mut Grads<T>,
        need_input_grad: bool,
    ) -> Option<Array4<T>> {
        let (co, n, oh, ow) = dy.dim();
        let dy2 = dy
            .view()
            .into_shape_with_order((co, n * oh * ow))
            .expect("dy contiguous");
        let dw = dy2.dot(&cache.cols.t());
        {
            let g = grads.get_mut(self.weight);
            let mut g2 = g.view_mut().into_dimensionality::<Ix2>().expect("2D");
            g2 += &dw;
        }
        if let Some(b) = self.bias {
            let g = grads.get_mut(b);
            for (ci, plane) in dy.outer_iter().enumerate() {
                g[[ci]] += plane.iter().copied().sum::<T>();
            }
        }
        if !need_input_grad {
            return None;
        }
        let dcols = self.weight_matrix(store).t().dot(&dy2);
        Some(self.col2im(&dcols, cache.input_dims, oh, ow))
    }

    fn im2col<T: Scalar>(&self, x: &Array4<T>, oh: usize, ow: usize) -> Array2<T> {
        let (c, n, h, w) = x.dim();
        let k = self.kernel;
        let xs = x.as_standard_layout();
        let xs = xs.as_slice().expect("standard layout");
        let ncols = n * oh * ow;
        let mut cols = vec![T::zero(); c * k * k * ncols];
        let pad = self.padding as isize;
        let stride = self.stride as isize;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for ni in 0..n {
                        let plane = &xs[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                        for oy in 0..oh {
                            let iy = oy as isize * stride + ky as isize - pad;
                            let base = (ni * oh + oy) * ow;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                            for ox in 0..ow {
                                let ix = ox as isize * stride + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    dst[base + ox] = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array2::from_shape_vec((c * k * k, ncols), cols).expect("im2col shape")
    }

    fn col2im<T: Scalar>(
        &self,
        dcols: &Array2<T>,
        dims: (usize, usize, usize, usize),
        oh: usize,
        ow: usize,
    ) -> Array4<T> {
        let (c, n, h, w) = dims;
        let k = self.kernel;
        let ncols = n * oh * ow;
        let dc = dcols.as_standard_layout();
        let dc = dc.as_slice().expect("standard layout");
        let mut dx = vec![T::zero(); c * n * h * w];
        let pad = self.padding as isize;
        let stride = self.stride as isize;
        for ci in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src = &dc[row * ncols..(row + 1) * ncols];
                    for ni in 0..n {
                        let plane = &mut dx[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                        for oy in 0..oh {
                            let iy = oy as isize * stride + ky as isize - pad;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let base = (ni * oh + oy) * ow;
                            let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                            for ox in 0..ow {
                                let ix = ox as isize * stride + kx as isize - pad;
                                if ix >= 0 && ix < w as isize {
                                    dst[ix as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Array4::from_shape_vec(dims, dx).expect("col2im shape")
    }
}
