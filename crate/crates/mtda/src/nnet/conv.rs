//! 2-D convolution via im2col + GEMM, plus global average pooling.

use ndarray::{Array1, Array2, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::{c, normal, Real};

/// Convolution with square kernel, symmetric zero padding and uniform stride.
#[derive(Debug, Clone)]
pub struct Conv2d<F: Real> {
    pub w: Array4<F>, // [out_ch, in_ch, k, k]
    pub b: Array1<F>, // [out_ch]
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone)]
pub struct Conv2dGrads<F: Real> {
    pub w: Array4<F>,
    pub b: Array1<F>,
}

/// Cached intermediates needed by the backward pass.
#[derive(Debug)]
pub struct ConvCache<F: Real> {
    cols: Array2<F>, // [B*H'*W', C*k*k]
    in_shape: (usize, usize, usize, usize),
    out_hw: (usize, usize),
}

impl<F: Real> Conv2d<F> {
    pub fn he(in_ch: usize, out_ch: usize, k: usize, stride: usize, pad: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = in_ch * k * k;
        let std = (2.0 / fan_in as f64).sqrt();
        Self {
            w: Array4::from_shape_fn((out_ch, in_ch, k, k), |_| normal::<F>(rng) * c(std)),
            b: Array1::zeros(out_ch),
            stride,
            pad,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let k = self.w.shape()[2];
        (
            (h + 2 * self.pad - k) / self.stride + 1,
            (w + 2 * self.pad - k) / self.stride + 1,
        )
    }

    fn im2col(&self, x: &Array4<F>) -> Array2<F> {
        let (batch, in_ch, h, w) = x.dim();
        let k = self.w.shape()[2];
        let (hp, wp) = self.out_hw(h, w);
        let mut cols = Array2::<F>::zeros((batch * hp * wp, in_ch * k * k));
        let xs = x.as_slice().expect("standard layout input");
        let cs = cols.as_slice_mut().expect("fresh buffer");
        let row_w = in_ch * k * k;
        for b in 0..batch {
            for oi in 0..hp {
                for oj in 0..wp {
                    let row = ((b * hp + oi) * wp + oj) * row_w;
                    let jj0 = (oj * self.stride) as isize - self.pad as isize;
                    for ci in 0..in_ch {
                        for ki in 0..k {
                            let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let col0 = row + (ci * k + ki) * k;
                            let src0 = ((b * in_ch + ci) * h + ii as usize) * w;
                            for kj in 0..k {
                                let jj = jj0 + kj as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                cs[col0 + kj] = xs[src0 + jj as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, gcols: &Array2<F>, in_shape: (usize, usize, usize, usize)) -> Array4<F> {
        let (batch, in_ch, h, w) = in_shape;
        let k = self.w.shape()[2];
        let (hp, wp) = self.out_hw(h, w);
        let mut gx = Array4::<F>::zeros(in_shape);
        let gs = gx.as_slice_mut().expect("fresh buffer");
        let gc = gcols.as_slice().expect("standard layout");
        let row_w = in_ch * k * k;
        for b in 0..batch {
            for oi in 0..hp {
                for oj in 0..wp {
                    let row = ((b * hp + oi) * wp + oj) * row_w;
                    let jj0 = (oj * self.stride) as isize - self.pad as isize;
                    for ci in 0..in_ch {
                        for ki in 0..k {
                            let ii = (oi * self.stride + ki) as isize - self.pad as isize;
                            if ii < 0 || ii >= h as isize {
                                continue;
                            }
                            let col0 = row + (ci * k + ki) * k;
                            let dst0 = ((b * in_ch + ci) * h + ii as usize) * w;
                            for kj in 0..k {
                                let jj = jj0 + kj as isize;
                                if jj < 0 || jj >= w as isize {
                                    continue;
                                }
                                gs[dst0 + jj as usize] = gs[dst0 + jj as usize] + gc[col0 + kj];
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, ConvCache<F>) {
        let (batch, in_ch, h, w) = x.dim();
        debug_assert_eq!(in_ch, self.w.shape()[1], "input channel mismatch");
        let k = self.w.shape()[2];
        let out_ch = self.w.shape()[0];
        let (hp, wp) = self.out_hw(h, w);
        let cols = self.im2col(x);
        let w2 = self
            .w
            .view()
            .into_shape_with_order((out_ch, in_ch * k * k))
            .expect("weight reshape");
        let mut y_mat = cols.dot(&w2.t()); // [B*H'*W', out_ch]
        y_mat += &self.b;
        let y = y_mat
            .into_shape_with_order((batch, hp, wp, out_ch))
            .expect("output reshape")
            .permuted_axes([0, 3, 1, 2])
            .as_standard_layout()
            .to_owned();
        (
            y,
            ConvCache {
                cols,
                in_shape: (batch, in_ch, h, w),
                out_hw: (hp, wp),
            },
        )
    }

    pub fn backward(&self, cache: &ConvCache<F>, gy: &Array4<F>) -> (Array4<F>, Conv2dGrads<F>) {
        let (batch, in_ch, _, _) = cache.in_shape;
        let (hp, wp) = cache.out_hw;
        let out_ch = self.w.shape()[0];
        let k = self.w.shape()[2];
        debug_assert_eq!(gy.dim(), (batch, out_ch, hp, wp));
        let gy_mat = gy
            .view()
            .permuted_axes([0, 2, 3, 1])
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((batch * hp * wp, out_ch))
            .expect("grad reshape");
        let gb = gy_mat.sum_axis(Axis(0));
        let gw = gy_mat
            .t()
            .dot(&cache.cols)
            .into_shape_with_order((out_ch, in_ch, k, k))
            .expect("weight grad reshape");
        let w2 = self
            .w
            .view()
            .into_shape_with_order((out_ch, in_ch * k * k))
            .expect("weight reshape");
        let gcols = gy_mat.dot(&w2);
        let gx = self.col2im(&gcols, cache.in_shape);
        (gx, Conv2dGrads { w: gw, b: gb })
    }
}

/// Mean over the spatial dimensions: `[B, C, H, W] -> [B, C]`.
pub fn global_avg_pool<F: Real>(x: &Array4<F>) -> Array2<F> {
    let (b, ch, h, w) = x.dim();
    let scale = c::<F>(1.0 / (h * w) as f64);
    let mut out = Array2::<F>::zeros((b, ch));
    for bi in 0..b {
        for ci in 0..ch {
            let mut acc = F::zero();
            for v in x.index_axis(Axis(0), bi).index_axis(Axis(0), ci).iter() {
                acc = acc + *v;
            }
            out[[bi, ci]] = acc * scale;
        }
    }
    out
}

pub fn global_avg_pool_backward<F: Real>(gy: &Array2<F>, h: usize, w: usize) -> Array4<F> {
    let (b, ch) = gy.dim();
    let scale = c::<F>(1.0 / (h * w) as f64);
    let mut gx = Array4::<F>::zeros((b, ch, h, w));
    for bi in 0..b {
        for ci in 0..ch {
            let g = gy[[bi, ci]] * scale;
            gx.index_axis_mut(Axis(0), bi)
                .index_axis_mut(Axis(0), ci)
                .fill(g);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::stream_rng;

    #[test]
    fn identity_one_by_one_kernel() {
        let mut rng = stream_rng(5, "conv");
        let mut conv = Conv2d::<f64>::he(2, 2, 1, 1, 0, &mut rng);
        conv.w.fill(0.0);
        conv.w[[0, 0, 0, 0]] = 1.0;
        conv.w[[1, 1, 0, 0]] = 1.0;
        let x = Array4::from_shape_fn((1, 2, 3, 3), |(_, c, i, j)| (c * 9 + i * 3 + j) as f64);
        let (y, _) = conv.forward(&x);
        assert_eq!(y, x);
    }

    #[test]
    fn output_shape_stride_two() {
        let mut rng = stream_rng(5, "conv");
        let conv = Conv2d::<f64>::he(3, 8, 3, 2, 1, &mut rng);
        let x = Array4::zeros((4, 3, 32, 32));
        let (y, _) = conv.forward(&x);
        assert_eq!(y.dim(), (4, 8, 16, 16));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = stream_rng(11, "conv-fd");
        let conv = Conv2d::<f64>::he(2, 3, 3, 2, 1, &mut rng);
        let x = Array4::from_shape_fn((2, 2, 6, 6), |_| normal::<f64>(&mut rng));
        let loss = |cv: &Conv2d<f64>, x: &Array4<f64>| cv.forward(x).0.mapv(|v| v * v).sum();

        let (y, cache) = conv.forward(&x);
        let gy = y.mapv(|v| 2.0 * v);
        let (gx, grads) = conv.backward(&cache, &gy);

        let eps = 1e-6;
        for &idx in &[(0usize, 0usize, 0usize, 0usize), (2, 1, 1, 2), (1, 0, 2, 1)] {
            let mut cp = conv.clone();
            cp.w[idx] += eps;
            let mut cm = conv.clone();
            cm.w[idx] -= eps;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps);
            let an = grads.w[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(1.0) < 1e-5,
                "w{idx:?}: fd={fd} an={an}"
            );
        }
        for &idx in &[(0usize, 0usize, 0usize, 0usize), (1, 1, 3, 4)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let mut xm = x.clone();
            xm[idx] -= eps;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps);
            let an = gx[idx];
            assert!(
                (fd - an).abs() / fd.abs().max(1.0) < 1e-5,
                "x{idx:?}: fd={fd} an={an}"
            );
        }
        let fd_b = {
            let mut cp = conv.clone();
            cp.b[1] += eps;
            let mut cm = conv.clone();
            cm.b[1] -= eps;
            (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps)
        };
        assert!((fd_b - grads.b[1]).abs() / fd_b.abs().max(1.0) < 1e-5);
    }

    #[test]
    fn gap_is_mean_and_backward_spreads() {
        let x = Array4::from_shape_fn((1, 1, 2, 2), |(_, _, i, j)| (i * 2 + j) as f64);
        let y = global_avg_pool(&x);
        assert!((y[[0, 0]] - 1.5).abs() < 1e-12);
        let gx = global_avg_pool_backward(&Array2::from_elem((1, 1), 4.0), 2, 2);
        assert_eq!(gx[[0, 0, 1, 1]], 1.0);
    }
}
