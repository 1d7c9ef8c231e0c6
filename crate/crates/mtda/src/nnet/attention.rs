//! Multi-head self-attention and a pre-norm transformer encoder block.
//!
//! Used by the hybrid convolutional/attention backbone. Token tensors are
//! `[B, T, D]`; internally rows are flattened to `[B*T, D]` for projections.

use ndarray::{s, Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;

use super::{c, relu, relu_backward, GradMap};
use super::{dyn1, dyn2, LayerNorm, Linear, Real};

#[derive(Debug, Clone)]
pub struct MultiHeadAttention<F: Real> {
    pub wq: Linear<F>,
    pub wk: Linear<F>,
    pub wv: Linear<F>,
    pub wo: Linear<F>,
    pub n_heads: usize,
}

#[derive(Debug)]
pub struct MhaCache<F: Real> {
    x2: Array2<F>,
    q: Array2<F>,
    k: Array2<F>,
    v: Array2<F>,
    o2: Array2<F>,
    /// Attention weights `[B, H, T, T]`; rows sum to one.
    pub attn: Array4<F>,
}

impl<F: Real> MultiHeadAttention<F> {
    pub fn new(d_model: usize, n_heads: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(d_model % n_heads == 0, "d_model must divide into heads");
        Self {
            wq: Linear::xavier(d_model, d_model, rng),
            wk: Linear::xavier(d_model, d_model, rng),
            wv: Linear::xavier(d_model, d_model, rng),
            wo: Linear::xavier(d_model, d_model, rng),
            n_heads,
        }
    }

    pub fn param_count(&self) -> usize {
        self.wq.param_count() + self.wk.param_count() + self.wv.param_count() + self.wo.param_count()
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, MhaCache<F>) {
        let (b, t, d) = x.dim();
        let dh = d / self.n_heads;
        let inv = c::<F>(1.0 / (dh as f64).sqrt());
        let x2 = x
            .view()
            .into_shape_with_order((b * t, d))
            .expect("token flatten")
            .to_owned();
        let q = self.wq.forward(&x2);
        let k = self.wk.forward(&x2);
        let v = self.wv.forward(&x2);
        let mut attn = Array4::<F>::zeros((b, self.n_heads, t, t));
        let mut o2 = Array2::<F>::zeros((b * t, d));
        for bi in 0..b {
            let rows = s![bi * t..(bi + 1) * t, ..];
            for h in 0..self.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let qh = q.slice(rows).slice_move(cols);
                let kh = k.slice(rows).slice_move(cols);
                let vh = v.slice(rows).slice_move(cols);
                let mut scores = qh.dot(&kh.t());
                scores.mapv_inplace(|s| s * inv);
                let a = super::softmax_rows(&scores);
                let oh = a.dot(&vh);
                o2.slice_mut(rows).slice_move(cols).assign(&oh);
                attn.slice_mut(s![bi, h, .., ..]).assign(&a);
            }
        }
        let y2 = self.wo.forward(&o2);
        let y = y2
            .into_shape_with_order((b, t, d))
            .expect("token unflatten");
        (y, MhaCache { x2, q, k, v, o2, attn })
    }

    /// Backward; accumulates parameter grads under `prefix.{wq,wk,wv,wo}.{w,b}`.
    pub fn backward(
        &self,
        cache: &MhaCache<F>,
        gy: &Array3<F>,
        prefix: &str,
        grads: &mut GradMap<F>,
    ) -> Array3<F> {
        let (b, t, d) = gy.dim();
        let dh = d / self.n_heads;
        let inv = c::<F>(1.0 / (dh as f64).sqrt());
        let gy2 = gy
            .view()
            .into_shape_with_order((b * t, d))
            .expect("token flatten")
            .to_owned();
        let (go2, gwo) = self.wo.backward(&cache.o2, &gy2);
        grads.add(format!("{prefix}.wo.w"), dyn2(gwo.w));
        grads.add(format!("{prefix}.wo.b"), dyn1(gwo.b));

        let mut gq = Array2::<F>::zeros((b * t, d));
        let mut gk = Array2::<F>::zeros((b * t, d));
        let mut gv = Array2::<F>::zeros((b * t, d));
        for bi in 0..b {
            let rows = s![bi * t..(bi + 1) * t, ..];
            for h in 0..self.n_heads {
                let cols = s![.., h * dh..(h + 1) * dh];
                let a = cache.attn.slice(s![bi, h, .., ..]);
                let qh = cache.q.slice(rows).slice_move(cols);
                let kh = cache.k.slice(rows).slice_move(cols);
                let vh = cache.v.slice(rows).slice_move(cols);
                let goh = go2.slice(rows).slice_move(cols);
                let ga = goh.dot(&vh.t());
                let gvh = a.t().dot(&goh);
                // softmax rows backward: dS = A ⊙ (dA − rowsum(dA ⊙ A))
                let rowdot = (&ga * &a).sum_axis(Axis(1));
                let mut gscores = ga.to_owned();
                for (mut row, &rd) in gscores.rows_mut().into_iter().zip(rowdot.iter()) {
                    row.mapv_inplace(|g| g - rd);
                }
                gscores = &gscores * &a;
                gscores.mapv_inplace(|g| g * inv);
                let gqh = gscores.dot(&kh);
                let gkh = gscores.t().dot(&qh);
                gq.slice_mut(rows).slice_move(cols).assign(&gqh);
                gk.slice_mut(rows).slice_move(cols).assign(&gkh);
                gv.slice_mut(rows).slice_move(cols).assign(&gvh);
            }
        }
        let (gx_q, gwq) = self.wq.backward(&cache.x2, &gq);
        let (gx_k, gwk) = self.wk.backward(&cache.x2, &gk);
        let (gx_v, gwv) = self.wv.backward(&cache.x2, &gv);
        grads.add(format!("{prefix}.wq.w"), dyn2(gwq.w));
        grads.add(format!("{prefix}.wq.b"), dyn1(gwq.b));
        grads.add(format!("{prefix}.wk.w"), dyn2(gwk.w));
        grads.add(format!("{prefix}.wk.b"), dyn1(gwk.b));
        grads.add(format!("{prefix}.wv.w"), dyn2(gwv.w));
        grads.add(format!("{prefix}.wv.b"), dyn1(gwv.b));
        let gx2 = gx_q + gx_k + gx_v;
        gx2.into_shape_with_order((b, t, d)).expect("token unflatten")
    }
}

/// Pre-norm encoder: `x + MHA(LN(x))` then `h + FFN(LN(h))` with a ReLU FFN.
#[derive(Debug, Clone)]
pub struct EncoderBlock<F: Real> {
    pub ln1: LayerNorm<F>,
    pub attn: MultiHeadAttention<F>,
    pub ln2: LayerNorm<F>,
    pub fc1: Linear<F>,
    pub fc2: Linear<F>,
}

pub struct EncoderCache<F: Real> {
    x2: Array2<F>,
    ln1: super::norm::LnCache<F>,
    mha: MhaCache<F>,
    ln2: super::norm::LnCache<F>,
    n2: Array2<F>,
    z1: Array2<F>,
    a1: Array2<F>,
}

impl<F: Real> EncoderCache<F> {
    /// Attention weights of this block, `[B, H, T, T]`.
    pub fn attn_weights(&self) -> &Array4<F> {
        &self.mha.attn
    }
}

impl<F: Real> EncoderBlock<F> {
    pub fn new(d_model: usize, n_heads: usize, mlp_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln1: LayerNorm::new(d_model),
            attn: MultiHeadAttention::new(d_model, n_heads, rng),
            ln2: LayerNorm::new(d_model),
            fc1: Linear::he(d_model, mlp_dim, rng),
            fc2: Linear::xavier(mlp_dim, d_model, rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.ln1.param_count()
            + self.attn.param_count()
            + self.ln2.param_count()
            + self.fc1.param_count()
            + self.fc2.param_count()
    }

    pub fn forward(&self, x: &Array3<F>) -> (Array3<F>, EncoderCache<F>) {
        let (b, t, d) = x.dim();
        let x2 = x
            .view()
            .into_shape_with_order((b * t, d))
            .expect("token flatten")
            .to_owned();
        let (n1, ln1c) = self.ln1.forward(&x2);
        let n1_3 = n1.into_shape_with_order((b, t, d)).expect("reshape");
        let (a3, mha) = self.attn.forward(&n1_3);
        let a2 = a3.into_shape_with_order((b * t, d)).expect("reshape");
        let h2 = &x2 + &a2;
        let (n2, ln2c) = self.ln2.forward(&h2);
        let _ = &h2;
        let z1 = self.fc1.forward(&n2);
        let a1 = relu(&z1);
        let m = self.fc2.forward(&a1);
        let y2 = &h2 + &m;
        let y = y2.into_shape_with_order((b, t, d)).expect("reshape");
        (
            y,
            EncoderCache {
                x2,
                ln1: ln1c,
                mha,
                ln2: ln2c,
                n2,
                z1,
                a1,
            },
        )
    }

    pub fn backward(
        &self,
        cache: &EncoderCache<F>,
        gy: &Array3<F>,
        prefix: &str,
        grads: &mut GradMap<F>,
    ) -> Array3<F> {
        let (b, t, d) = gy.dim();
        let gy2 = gy
            .view()
            .into_shape_with_order((b * t, d))
            .expect("token flatten")
            .to_owned();
        // FFN branch
        let (ga1, gfc2) = self.fc2.backward(&cache.a1, &gy2);
        grads.add(format!("{prefix}.fc2.w"), dyn2(gfc2.w));
        grads.add(format!("{prefix}.fc2.b"), dyn1(gfc2.b));
        let gz1 = relu_backward(&cache.z1, &ga1);
        let (gn2, gfc1) = self.fc1.backward(&cache.n2, &gz1);
        grads.add(format!("{prefix}.fc1.w"), dyn2(gfc1.w));
        grads.add(format!("{prefix}.fc1.b"), dyn1(gfc1.b));
        let (gh_ln2, gln2) = self.ln2.backward(&cache.ln2, &gn2);
        grads.add(format!("{prefix}.ln2.gamma"), dyn1(gln2.gamma));
        grads.add(format!("{prefix}.ln2.beta"), dyn1(gln2.beta));
        let gh2 = &gy2 + &gh_ln2;
        // Attention branch
        let gh3 = gh2
            .view()
            .into_shape_with_order((b, t, d))
            .expect("reshape")
            .to_owned();
        let gn1_3 = self
            .attn
            .backward(&cache.mha, &gh3, &format!("{prefix}.attn"), grads);
        let gn1 = gn1_3
            .into_shape_with_order((b * t, d))
            .expect("reshape");
        let (gx_ln1, gln1) = self.ln1.backward(&cache.ln1, &gn1);
        grads.add(format!("{prefix}.ln1.gamma"), dyn1(gln1.gamma));
        grads.add(format!("{prefix}.ln1.beta"), dyn1(gln1.beta));
        let gx2 = &gh2 + &gx_ln1;
        let _ = &cache.x2;
        gx2.into_shape_with_order((b, t, d)).expect("reshape")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{normal, stream_rng};

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = stream_rng(21, "mha");
        let mha = MultiHeadAttention::<f64>::new(8, 2, &mut rng);
        let x = Array3::from_shape_fn((2, 5, 8), |_| normal::<f64>(&mut rng));
        let (y, cache) = mha.forward(&x);
        assert_eq!(y.dim(), (2, 5, 8));
        for bi in 0..2 {
            for h in 0..2 {
                for i in 0..5 {
                    let row_sum: f64 = cache.attn.slice(s![bi, h, i, ..]).sum();
                    assert!((row_sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = stream_rng(23, "enc-fd");
        let block = EncoderBlock::<f64>::new(6, 2, 10, &mut rng);
        let x = Array3::from_shape_fn((2, 4, 6), |_| normal::<f64>(&mut rng));
        let loss = |blk: &EncoderBlock<f64>, x: &Array3<f64>| blk.forward(x).0.mapv(|v| v * v).sum();
        let (y, cache) = block.forward(&x);
        let gy = y.mapv(|v| 2.0 * v);
        let mut grads = GradMap::new();
        let gx = block.backward(&cache, &gy, "blk", &mut grads);

        let eps = 1e-6;
        // attention weight probe
        let fd = {
            let mut bp = block.clone();
            bp.attn.wq.w[[0, 1]] += eps;
            let mut bm = block.clone();
            bm.attn.wq.w[[0, 1]] -= eps;
            (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * eps)
        };
        let an = grads.get("blk.attn.wq.w").unwrap()[[0, 1]];
        assert!((fd - an).abs() / fd.abs().max(1e-2) < 1e-4, "wq fd={fd} an={an}");
        // ffn weight probe
        let fd = {
            let mut bp = block.clone();
            bp.fc1.w[[2, 3]] += eps;
            let mut bm = block.clone();
            bm.fc1.w[[2, 3]] -= eps;
            (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * eps)
        };
        let an = grads.get("blk.fc1.w").unwrap()[[2, 3]];
        assert!((fd - an).abs() / fd.abs().max(1e-2) < 1e-4, "fc1 fd={fd} an={an}");
        // input probe
        let fd = {
            let mut xp = x.clone();
            xp[[1, 2, 3]] += eps;
            let mut xm = x.clone();
            xm[[1, 2, 3]] -= eps;
            (loss(&block, &xp) - loss(&block, &xm)) / (2.0 * eps)
        };
        assert!((fd - gx[[1, 2, 3]]).abs() / fd.abs().max(1e-2) < 1e-4, "gx");
    }
}
