//! Minimal neural-network plumbing: layers with explicit forward/backward
//! passes, a momentum-SGD optimizer, seeded initialization, and a named
//! parameter/checkpoint scheme.
//!
//! Everything is generic over the element type so the same network runs in
//! `f32` for training speed and in `f64` for finite-difference gradient
//! verification. All randomness flows through named ChaCha streams derived
//! from a single seed, and no operation depends on hash-map iteration order,
//! so a fixed (config, seed) pair reproduces bit-identical results.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod attention;
pub mod conv;
pub mod linear;
pub mod norm;

pub use attention::{EncoderBlock, MultiHeadAttention};
pub use conv::{global_avg_pool, global_avg_pool_backward, Conv2d, Conv2dGrads};
pub use linear::{Linear, LinearGrads};
pub use norm::{BatchNorm1d, BatchNormGrads, LayerNorm, LayerNormGrads};

/// Element type the networks are generic over (`f32` or `f64`).
pub trait Real: ndarray::NdFloat + num_traits::FromPrimitive {
    const BITS: u32;
}

impl Real for f32 {
    const BITS: u32 = 32;
}
impl Real for f64 {
    const BITS: u32 = 64;
}

/// Lossless-enough constant conversion from `f64` literals into `F`.
#[inline]
pub fn c<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("finite literal")
}

#[inline]
pub fn to_f64<F: Real>(x: F) -> f64 {
    num_traits::ToPrimitive::to_f64(&x).expect("finite value")
}

// ---------------------------------------------------------------------------
// Seeded randomness
// ---------------------------------------------------------------------------

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Independent deterministic RNG stream named by purpose.
///
/// Streams with different names never overlap; the same (seed, name) pair
/// always yields the same sequence.
pub fn stream_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    rng
}

/// Standard-normal draw via Box-Muller so the byte stream is identical for
/// `f32` and `f64` instantiations of the same named stream.
pub fn normal<F: Real>(rng: &mut ChaCha8Rng) -> F {
    loop {
        let u1: f64 = rng.random();
        let u2: f64 = rng.random();
        if u1 > 1e-300 {
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            return c(z);
        }
    }
}

/// He-normal initialized matrix, for layers followed by ReLU.
pub fn he_init<F: Real>(rows: usize, cols: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Array2<F> {
    let std = (2.0 / fan_in as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| normal::<F>(rng) * c(std))
}

/// Xavier-normal initialized matrix, for linear output layers.
pub fn xavier_init<F: Real>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut ChaCha8Rng,
) -> Array2<F> {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| normal::<F>(rng) * c(std))
}

// ---------------------------------------------------------------------------
// Elementwise activations and probability helpers
// ---------------------------------------------------------------------------

/// ReLU forward.
pub fn relu<F: Real>(x: &Array2<F>) -> Array2<F> {
    x.mapv(|v| if v > F::zero() { v } else { F::zero() })
}

/// ReLU backward given the forward *input*.
pub fn relu_backward<F: Real>(x: &Array2<F>, gy: &Array2<F>) -> Array2<F> {
    let mut gx = gy.clone();
    ndarray::Zip::from(&mut gx).and(x).for_each(|g, &v| {
        if v <= F::zero() {
            *g = F::zero();
        }
    });
    gx
}

pub fn sigmoid<F: Real>(z: F) -> F {
    F::one() / (F::one() + (-z).exp())
}

/// Row-wise softmax with max-subtraction for stability.
pub fn softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Shannon entropy of each probability row, with log clamping at `eps`.
pub fn entropy_rows<F: Real>(probs: &Array2<F>, eps: f64) -> Vec<f64> {
    probs
        .rows()
        .into_iter()
        .map(|row| {
            -row.iter()
                .map(|&p| {
                    let p = to_f64(p);
                    p * p.max(eps).ln()
                })
                .sum::<f64>()
        })
        .collect()
}

/// Row-wise argmax (first index on ties).
pub fn argmax_rows<F: Real>(m: &Array2<F>) -> Vec<usize> {
    m.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = row[0];
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best = i;
                    best_v = v;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Named parameters, gradients, optimizer
// ---------------------------------------------------------------------------

/// Gradient accumulator keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct GradMap<F: Real> {
    entries: BTreeMap<String, ArrayD<F>>,
}

impl<F: Real> GradMap<F> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    /// Insert or elementwise-accumulate a gradient.
    pub fn add(&mut self, name: impl Into<String>, grad: ArrayD<F>) {
        let name = name.into();
        match self.entries.get_mut(&name) {
            Some(existing) => *existing = &*existing + &grad,
            None => {
                self.entries.insert(name, grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.entries.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// SGD with momentum and decoupled L2 weight decay folded into the gradient.
///
/// Velocity buffers are keyed by parameter name and persist across steps, so
/// a parameter updated by two phases of the same iteration shares one buffer.
#[derive(Debug, Clone)]
pub struct Sgd<F: Real> {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<String, ArrayD<F>>,
}

impl<F: Real> Sgd<F> {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Reset all velocity buffers.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    /// Apply one update to every parameter that has a gradient in `grads`.
    /// `lr_for` maps a parameter name to its learning rate.
    pub fn step<'a, I>(&mut self, params: I, grads: &GradMap<F>, lr_for: impl Fn(&str) -> f64)
    where
        I: IntoIterator<Item = (String, ArrayViewMutD<'a, F>)>,
    {
        let mu = c::<F>(self.momentum);
        let wd = c::<F>(self.weight_decay);
        for (name, mut value) in params {
            let Some(grad) = grads.get(&name) else {
                continue;
            };
            debug_assert_eq!(grad.shape(), value.shape(), "grad shape for {name}");
            let lr = c::<F>(lr_for(&name));
            let vel = self
                .velocity
                .entry(name)
                .or_insert_with(|| ArrayD::zeros(grad.raw_dim()));
            ndarray::Zip::from(vel.view_mut())
                .and(grad)
                .and(&value)
                .for_each(|v, &g, &p| {
                    *v = mu * *v + g + wd * p;
                });
            ndarray::Zip::from(&mut value).and(vel.view()).for_each(|p, &v| {
                *p = *p - lr * v;
            });
        }
    }
}

/// Convenience: lift a typed array into the dynamic-dimension gradient form.
pub fn dyn2<F: Real>(a: Array2<F>) -> ArrayD<F> {
    a.into_dyn()
}

pub fn dyn1<F: Real>(a: Array1<F>) -> ArrayD<F> {
    a.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stream_rng_is_deterministic_and_named() {
        let a: Vec<f64> = {
            let mut r = stream_rng(7, "init");
            (0..4).map(|_| r.random()).collect()
        };
        let b: Vec<f64> = {
            let mut r = stream_rng(7, "init");
            (0..4).map(|_| r.random()).collect()
        };
        let c: Vec<f64> = {
            let mut r = stream_rng(7, "other");
            (0..4).map(|_| r.random()).collect()
        };
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Array2::from_shape_fn((5, 7), |(i, j)| (i * 7 + j) as f64 * 0.3 - 2.0);
        let p = softmax_rows(&logits);
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_of_uniform_is_ln_k() {
        let probs = Array2::from_elem((3, 8), 1.0 / 8.0);
        for h in entropy_rows(&probs, 1e-7) {
            assert!((h - (8f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = dyn2(Array2::<f64>::from_elem((2, 2), 1.0));
        let mut grads = GradMap::new();
        grads.add("w", dyn2(Array2::from_elem((2, 2), 0.5)));
        let mut opt = Sgd::new(0.0, 0.0);
        opt.step(
            vec![("w".to_string(), p.view_mut())],
            &grads,
            |_| 0.1,
        );
        assert!((p[[0, 0]] - 0.95).abs() < 1e-12);
    }

    #[test]
    fn gradmap_accumulates() {
        let mut g = GradMap::new();
        g.add("w", dyn2(Array2::<f64>::ones((2, 2))));
        g.add("w", dyn2(Array2::<f64>::ones((2, 2))));
        assert_eq!(g.get("w").unwrap()[[1, 1]], 2.0);
    }
}

/// Forward-pass mode: training uses batch statistics (and would enable any
/// stochastic layers); eval is deterministic and per-sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        matches!(self, Mode::Train)
    }
}
