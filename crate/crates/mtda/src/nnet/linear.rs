//! Fully connected layer with explicit backward pass.

use ndarray::{Array1, Array2, Axis};
use rand_chacha::ChaCha8Rng;

use super::{he_init, xavier_init, Real};

/// `y = x · Wᵀ + b` over row-major batches (`x: [B, in]`, `y: [B, out]`).
#[derive(Debug, Clone)]
pub struct Linear<F: Real> {
    pub w: Array2<F>, // [out, in]
    pub b: Array1<F>, // [out]
}

#[derive(Debug, Clone)]
pub struct LinearGrads<F: Real> {
    pub w: Array2<F>,
    pub b: Array1<F>,
}

impl<F: Real> Linear<F> {
    /// He-initialized layer (use before ReLU).
    pub fn he(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: he_init(out_dim, in_dim, in_dim, rng),
            b: Array1::zeros(out_dim),
        }
    }

    /// Xavier-initialized layer (use for output projections).
    pub fn xavier(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w: xavier_init(out_dim, in_dim, in_dim, out_dim, rng),
            b: Array1::zeros(out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        debug_assert_eq!(x.ncols(), self.in_dim());
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }

    /// Returns (grad wrt input, grads wrt parameters).
    pub fn backward(&self, x: &Array2<F>, gy: &Array2<F>) -> (Array2<F>, LinearGrads<F>) {
        debug_assert_eq!(gy.ncols(), self.out_dim());
        let gx = gy.dot(&self.w);
        let gw = gy.t().dot(x);
        let gb = gy.sum_axis(Axis(0));
        (gx, LinearGrads { w: gw, b: gb })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::stream_rng;

    fn fd_check(dim_in: usize, dim_out: usize, batch: usize) {
        let mut rng = stream_rng(3, "linear-test");
        let layer = Linear::<f64>::he(dim_in, dim_out, &mut rng);
        let x = Array2::from_shape_fn((batch, dim_in), |_| super::super::normal::<f64>(&mut rng));
        // Scalar loss: sum of squares of outputs.
        let loss = |l: &Linear<f64>, x: &Array2<f64>| l.forward(x).mapv(|v| v * v).sum();
        let y = layer.forward(&x);
        let gy = y.mapv(|v| 2.0 * v);
        let (gx, grads) = layer.backward(&x, &gy);

        let eps = 1e-6;
        // probe three weight entries
        for &(i, j) in &[(0, 0), (dim_out - 1, dim_in - 1), (0, dim_in / 2)] {
            let mut lp = layer.clone();
            lp.w[[i, j]] += eps;
            let mut lm = layer.clone();
            lm.w[[i, j]] -= eps;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            let an = grads.w[[i, j]];
            assert!(
                (fd - an).abs() / fd.abs().max(1.0) < 1e-5,
                "w[{i},{j}]: fd={fd} an={an}"
            );
        }
        // probe an input entry
        let mut xp = x.clone();
        xp[[0, 0]] += eps;
        let mut xm = x.clone();
        xm[[0, 0]] -= eps;
        let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * eps);
        assert!((fd - gx[[0, 0]]).abs() / fd.abs().max(1.0) < 1e-5);
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(6, 4, 5);
        fd_check(3, 9, 2);
    }

    #[test]
    fn forward_shape_and_bias() {
        let mut rng = stream_rng(1, "t");
        let mut layer = Linear::<f64>::he(3, 2, &mut rng);
        layer.w.fill(0.0);
        layer.b[0] = 0.5;
        layer.b[1] = -0.25;
        let y = layer.forward(&Array2::ones((4, 3)));
        assert_eq!(y.shape(), &[4, 2]);
        assert_eq!(y[[2, 0]], 0.5);
        assert_eq!(y[[3, 1]], -0.25);
    }
}
