//! Batch normalization (1-D, over features) and layer normalization.

use ndarray::{Array1, Array2, Axis};

use super::{c, Real};

const BN_EPS: f64 = 1e-5;

/// BatchNorm over `[B, D]` activations.
///
/// Training mode normalizes with batch statistics and maintains running
/// estimates; eval mode normalizes with the running estimates so single
/// samples are handled deterministically.
#[derive(Debug, Clone)]
pub struct BatchNorm1d<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BatchNormGrads<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

/// Intermediates for the backward pass.
#[derive(Debug)]
pub struct BnCache<F: Real> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
    train: bool,
}

impl<F: Real> BatchNorm1d<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
            running_mean: Array1::zeros(dim),
            running_var: Array1::ones(dim),
            momentum: 0.1,
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    /// Forward pass; `train` selects batch vs running statistics. Running
    /// estimates are updated only in training mode.
    pub fn forward(&mut self, x: &Array2<F>, train: bool) -> (Array2<F>, BnCache<F>) {
        let eps = c::<F>(BN_EPS);
        let (mean, var) = if train {
            let mean = x.mean_axis(Axis(0)).expect("nonempty batch");
            let var = x
                .mapv(|v| v * v)
                .mean_axis(Axis(0))
                .expect("nonempty batch")
                - &mean.mapv(|m| m * m);
            let mom = c::<F>(self.momentum);
            let keep = F::one() - mom;
            ndarray::Zip::from(&mut self.running_mean)
                .and(&mean)
                .for_each(|r, &m| *r = keep * *r + mom * m);
            ndarray::Zip::from(&mut self.running_var)
                .and(&var)
                .for_each(|r, &v| *r = keep * *r + mom * v);
            (mean, var)
        } else {
            (self.running_mean.clone(), self.running_var.clone())
        };
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let mut xhat = x - &mean;
        xhat *= &inv_std;
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (
            y,
            BnCache {
                xhat,
                inv_std,
                train,
            },
        )
    }

    pub fn backward(&self, cache: &BnCache<F>, gy: &Array2<F>) -> (Array2<F>, BatchNormGrads<F>) {
        let n = c::<F>(gy.nrows() as f64);
        let ggamma = (gy * &cache.xhat).sum_axis(Axis(0));
        let gbeta = gy.sum_axis(Axis(0));
        let gxhat = gy * &self.gamma;
        if cache.train {
            // gx = inv_std/N * (N*gxhat - sum(gxhat) - xhat * sum(gxhat*xhat))
            let sum_g = gxhat.sum_axis(Axis(0));
            let sum_gx = (&gxhat * &cache.xhat).sum_axis(Axis(0));
            let mut gx = gxhat.mapv(|v| v * n);
            gx -= &sum_g;
            gx -= &(&cache.xhat * &sum_gx);
            gx *= &cache.inv_std.mapv(|v| v / n);
            (gx, BatchNormGrads { gamma: ggamma, beta: gbeta })
        } else {
            let gx = &gxhat * &cache.inv_std;
            (gx, BatchNormGrads { gamma: ggamma, beta: gbeta })
        }
    }
}

/// LayerNorm over the last axis of `[N, D]` rows.
#[derive(Debug, Clone)]
pub struct LayerNorm<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

#[derive(Debug, Clone)]
pub struct LayerNormGrads<F: Real> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
}

#[derive(Debug)]
pub struct LnCache<F: Real> {
    xhat: Array2<F>,
    inv_std: Array1<F>, // per row
}

impl<F: Real> LayerNorm<F> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }

    pub fn forward(&self, x: &Array2<F>) -> (Array2<F>, LnCache<F>) {
        let d = c::<F>(x.ncols() as f64);
        let eps = c::<F>(BN_EPS);
        let mean = x.mean_axis(Axis(1)).expect("nonempty rows");
        let var = x.mapv(|v| v * v).mean_axis(Axis(1)).expect("nonempty rows") - &mean.mapv(|m| m * m);
        let _ = d;
        let inv_std = var.mapv(|v| F::one() / (v + eps).sqrt());
        let mut xhat = x.clone();
        for (mut row, (&m, &is)) in xhat.rows_mut().into_iter().zip(mean.iter().zip(inv_std.iter())) {
            row.mapv_inplace(|v| (v - m) * is);
        }
        let mut y = &xhat * &self.gamma;
        y += &self.beta;
        (y, LnCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LnCache<F>, gy: &Array2<F>) -> (Array2<F>, LayerNormGrads<F>) {
        let d = c::<F>(gy.ncols() as f64);
        let ggamma = (gy * &cache.xhat).sum_axis(Axis(0));
        let gbeta = gy.sum_axis(Axis(0));
        let gxhat = gy * &self.gamma;
        let mut gx = Array2::<F>::zeros(gy.raw_dim());
        for (i, mut grow) in gx.rows_mut().into_iter().enumerate() {
            let g = gxhat.row(i);
            let xh = cache.xhat.row(i);
            let mean_g = g.sum() / d;
            let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).fold(F::zero(), |s, v| s + v) / d;
            for (j, gv) in grow.iter_mut().enumerate() {
                *gv = cache.inv_std[i] * (g[j] - mean_g - xh[j] * mean_gx);
            }
        }
        (gx, LayerNormGrads { gamma: ggamma, beta: gbeta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{normal, stream_rng};

    #[test]
    fn bn_train_output_is_normalized() {
        let mut rng = stream_rng(2, "bn");
        let mut bn = BatchNorm1d::<f64>::new(4);
        let x = Array2::from_shape_fn((64, 4), |_| normal::<f64>(&mut rng) * 3.0 + 1.0);
        let (y, _) = bn.forward(&x, true);
        let mean = y.mean_axis(Axis(0)).unwrap();
        let var = y.mapv(|v| v * v).mean_axis(Axis(0)).unwrap() - &mean.mapv(|m| m * m);
        for d in 0..4 {
            assert!(mean[d].abs() < 1e-10);
            assert!((var[d] - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn bn_eval_uses_running_stats_per_sample() {
        let mut rng = stream_rng(2, "bn2");
        let mut bn = BatchNorm1d::<f64>::new(3);
        for _ in 0..50 {
            let x = Array2::from_shape_fn((32, 3), |_| normal::<f64>(&mut rng) * 2.0 - 0.5);
            bn.forward(&x, true);
        }
        let x = Array2::from_shape_fn((5, 3), |_| normal::<f64>(&mut rng));
        let (y_full, _) = bn.forward(&x, false);
        // single-row eval gives the same answer: per-sample function in eval mode
        let (y_one, _) = bn.forward(&x.slice(ndarray::s![0..1, ..]).to_owned(), false);
        for d in 0..3 {
            assert!((y_full[[0, d]] - y_one[[0, d]]).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_gradients_match_finite_differences() {
        let mut rng = stream_rng(9, "bn-fd");
        let x = Array2::from_shape_fn((6, 3), |_| normal::<f64>(&mut rng));
        let base = {
            let mut bn = BatchNorm1d::<f64>::new(3);
            bn.gamma = Array1::from_vec(vec![1.2, 0.8, 1.5]);
            bn.beta = Array1::from_vec(vec![0.1, -0.2, 0.0]);
            bn
        };
        let loss = |bn: &BatchNorm1d<f64>, x: &Array2<f64>| {
            bn.clone().forward(x, true).0.mapv(|v| v * v).sum()
        };
        let mut bn = base.clone();
        let (y, cache) = bn.forward(&x, true);
        let gy = y.mapv(|v| 2.0 * v);
        let (gx, grads) = bn.backward(&cache, &gy);

        let eps = 1e-6;
        for j in 0..3 {
            let mut bp = base.clone();
            bp.gamma[j] += eps;
            let mut bm = base.clone();
            bm.gamma[j] -= eps;
            let fd = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * eps);
            assert!(
                (fd - grads.gamma[j]).abs() / fd.abs().max(1.0) < 1e-5,
                "gamma[{j}]"
            );
        }
        for &(i, j) in &[(0usize, 0usize), (5, 2), (3, 1)] {
            let mut xp = x.clone();
            xp[[i, j]] += eps;
            let mut xm = x.clone();
            xm[[i, j]] -= eps;
            let fd = (loss(&base, &xp) - loss(&base, &xm)) / (2.0 * eps);
            assert!(
                (fd - gx[[i, j]]).abs() / fd.abs().max(1e-3) < 1e-4,
                "x[{i},{j}]: fd={fd} an={}",
                gx[[i, j]]
            );
        }
    }

    #[test]
    fn ln_gradients_match_finite_differences() {
        let mut rng = stream_rng(13, "ln-fd");
        let x = Array2::from_shape_fn((4, 5), |_| normal::<f64>(&mut rng));
        let mut ln = LayerNorm::<f64>::new(5);
        ln.gamma = Array1::from_shape_fn(5, |i| 1.0 + 0.1 * i as f64);
        let loss = |ln: &LayerNorm<f64>, x: &Array2<f64>| ln.forward(x).0.mapv(|v| v * v).sum();
        let (y, cache) = ln.forward(&x);
        let gy = y.mapv(|v| 2.0 * v);
        let (gx, _grads) = ln.backward(&cache, &gy);
        let eps = 1e-6;
        for &(i, j) in &[(0usize, 0usize), (3, 4), (2, 2)] {
            let mut xp = x.clone();
            xp[[i, j]] += eps;
            let mut xm = x.clone();
            xm[[i, j]] -= eps;
            let fd = (loss(&ln, &xp) - loss(&ln, &xm)) / (2.0 * eps);
            assert!(
                (fd - gx[[i, j]]).abs() / fd.abs().max(1e-3) < 1e-4,
                "x[{i},{j}]"
            );
        }
    }
}
