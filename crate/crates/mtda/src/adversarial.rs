//! Domain discriminator with gradient reversal for source/target feature
//! alignment. Convention: score 1 = predicted target, 0 = predicted source;
//! pseudo-source rows (including accepted target pseudo-samples) carry flag 0.

use ndarray::{Array1, Array2, ArrayViewMutD};

use crate::backbone::FeatureMatrix;
use crate::error::{Error, Result};
use crate::nnet::{
    c, dyn1, dyn2, relu, relu_backward, sigmoid, stream_rng, to_f64, GradMap, Linear, Real,
};

/// Per-sample domain probabilities after the sigmoid, in (0, 1).
pub type DomainScore<F> = Array1<F>;

const PROB_EPS: f64 = 1e-7;

/// Two-layer MLP d_f -> d_f -> 1 with ReLU in between.
#[derive(Debug, Clone)]
pub struct Discriminator<F: Real> {
    pub l1: Linear<F>,
    pub l2: Linear<F>,
}

pub struct DiscCache<F: Real> {
    feats: Array2<F>,
    z1: Array2<F>,
    a1: Array2<F>,
    /// Pre-sigmoid logits, `[B]`.
    pub logits: Array1<F>,
    pub scores: DomainScore<F>,
}

impl<F: Real> Discriminator<F> {
    pub fn init(d_f: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "discriminator");
        Self {
            l1: Linear::he(d_f, d_f, &mut rng),
            l2: Linear::xavier(d_f, 1, &mut rng),
        }
    }

    pub fn forward(&self, feats: &FeatureMatrix<F>) -> DiscCache<F> {
        let z1 = self.l1.forward(feats);
        let a1 = relu(&z1);
        let z2 = self.l2.forward(&a1); // [B, 1]
        let logits = z2.column(0).to_owned();
        let scores = logits.mapv(sigmoid);
        DiscCache {
            feats: feats.clone(),
            z1,
            a1,
            logits,
            scores,
        }
    }

    /// Backward from grads on the pre-sigmoid logits. Accumulates `disc.*`
    /// parameter grads; returns grad wrt input features.
    pub fn backward(
        &self,
        cache: &DiscCache<F>,
        glogits: &Array1<F>,
        grads: &mut GradMap<F>,
    ) -> Array2<F> {
        let g2 = glogits
            .view()
            .into_shape_with_order((glogits.len(), 1))
            .expect("column grad")
            .to_owned();
        let (ga1, gl2) = self.l2.backward(&cache.a1, &g2);
        grads.add("disc.l2.w", dyn2(gl2.w));
        grads.add("disc.l2.b", dyn1(gl2.b));
        let gz1 = relu_backward(&cache.z1, &ga1);
        let (gfeats, gl1) = self.l1.backward(&cache.feats, &gz1);
        grads.add("disc.l1.w", dyn2(gl1.w));
        grads.add("disc.l1.b", dyn1(gl1.b));
        gfeats
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        vec![
            ("disc.l1.w".to_string(), self.l1.w.view_mut().into_dyn()),
            ("disc.l1.b".to_string(), self.l1.b.view_mut().into_dyn()),
            ("disc.l2.w".to_string(), self.l2.w.view_mut().into_dyn()),
            ("disc.l2.b".to_string(), self.l2.b.view_mut().into_dyn()),
        ]
    }
}

/// The `discriminate` operation: domain scores for a feature batch.
pub fn discriminate<F: Real>(disc: &Discriminator<F>, feats: &FeatureMatrix<F>) -> DomainScore<F> {
    disc.forward(feats).scores
}

/// Gradient reversal layer: identity forward, backward multiplies the
/// incoming gradient by `-lambda` before it reaches the extractor.
#[derive(Debug, Clone, Copy)]
pub struct Grl {
    pub lambda: f64,
}

impl Grl {
    pub fn new(lambda: f64) -> Self {
        assert!(lambda >= 0.0, "lambda_adv must be nonnegative");
        Self { lambda }
    }

    pub fn forward<F: Real>(&self, feats: &Array2<F>) -> Array2<F> {
        feats.clone()
    }

    pub fn backward<F: Real>(&self, grad: &Array2<F>) -> Array2<F> {
        grad.mapv(|g| g * c::<F>(-self.lambda))
    }
}

/// Mean binary cross-entropy between domain scores and 0/1 flags.
pub fn adversarial_loss<F: Real>(scores: &DomainScore<F>, flags: &[u8]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("adversarial loss over an empty batch".into()));
    }
    if scores.len() != flags.len() {
        return Err(Error::Contract(format!(
            "{} scores vs {} flags",
            scores.len(),
            flags.len()
        )));
    }
    let mut total = 0.0;
    for (s, &f) in scores.iter().zip(flags) {
        let p = to_f64(*s);
        total -= if f == 1 {
            p.max(PROB_EPS).ln()
        } else {
            (1.0 - p).max(PROB_EPS).ln()
        };
    }
    Ok(total / scores.len() as f64)
}

/// Gradient of the mean BCE wrt the pre-sigmoid logits: `(sigma(z) - flag)/B`.
pub fn adversarial_loss_grad<F: Real>(scores: &DomainScore<F>, flags: &[u8]) -> Array1<F> {
    let n = c::<F>(scores.len() as f64);
    Array1::from_shape_fn(scores.len(), |i| {
        (scores[i] - c::<F>(f64::from(flags[i]))) / n
    })
}

/// Lambda schedule for the adversarial weight.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum LambdaSchedule {
    /// Constant lambda.
    Fixed { value: f64 },
    /// `ceiling * (2 / (1 + exp(-10 p)) - 1)` with `p` the fraction of the
    /// current domain's adaptation iterations elapsed.
    Ramp { ceiling: f64 },
}

impl LambdaSchedule {
    pub fn value_at(&self, progress: f64) -> f64 {
        match *self {
            LambdaSchedule::Fixed { value } => value,
            LambdaSchedule::Ramp { ceiling } => {
                ceiling * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{normal, stream_rng};

    #[test]
    fn zero_final_layer_scores_half() {
        let mut d = Discriminator::<f64>::init(16, 1);
        d.l2.w.fill(0.0);
        d.l2.b.fill(0.0);
        let feats = Array2::from_elem((5, 16), 0.7);
        let s = discriminate(&d, &feats);
        assert_eq!(s.len(), 5);
        for v in s.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn scores_permute_with_batch() {
        let d = Discriminator::<f64>::init(8, 3);
        let mut rng = stream_rng(4, "disc");
        let feats = Array2::from_shape_fn((4, 8), |_| normal::<f64>(&mut rng));
        let s = discriminate(&d, &feats);
        let perm = [2usize, 0, 3, 1];
        let permuted = Array2::from_shape_fn((4, 8), |(i, j)| feats[[perm[i], j]]);
        let sp = discriminate(&d, &permuted);
        for i in 0..4 {
            assert_eq!(sp[i], s[perm[i]]);
        }
    }

    #[test]
    fn grl_identity_forward_scaled_backward() {
        let grl = Grl::new(0.8);
        let x = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        assert_eq!(grl.forward(&x), x);
        let g = Array2::<f64>::from_elem((3, 4), 2.0);
        let gb = grl.backward(&g);
        for v in gb.iter() {
            assert!((v + 1.6).abs() < 1e-12);
        }
        // lambda = 1: plain sign flip; lambda = 0: annihilation
        assert_eq!(Grl::new(1.0).backward(&g)[[0, 0]], -2.0);
        assert_eq!(Grl::new(0.0).backward(&g)[[0, 0]], 0.0);
    }

    #[test]
    fn bce_analytic_values() {
        // all scores 0.5 -> ln 2
        let s = Array1::from_elem(6, 0.5f64);
        let l = adversarial_loss(&s, &[0, 1, 0, 1, 0, 1]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);

        // hand case: scores [0.8, 0.3], flags [1, 0] -> -(ln 0.8 + ln 0.7)/2
        let s = Array1::from_vec(vec![0.8f64, 0.3]);
        let l = adversarial_loss(&s, &[1, 0]).unwrap();
        let expect = -(0.8f64.ln() + 0.7f64.ln()) / 2.0;
        assert!((l - expect).abs() < 1e-12);
        assert!((l - 0.2899).abs() < 5e-4);

        // perfect predictions, clamped
        let s = Array1::from_vec(vec![1.0f64 - 1e-9, 1e-9]);
        let l = adversarial_loss(&s, &[1, 0]).unwrap();
        assert!(l < 1e-6);

        // empty batch errors
        let s = Array1::<f64>::zeros(0);
        assert!(adversarial_loss(&s, &[]).is_err());
    }

    #[test]
    fn disc_gradcheck_f64() {
        let d = Discriminator::<f64>::init(6, 7);
        let mut rng = stream_rng(9, "disc-fd");
        let feats = Array2::from_shape_fn((4, 6), |_| normal::<f64>(&mut rng));
        let flags = [0u8, 1, 1, 0];
        let loss = |d: &Discriminator<f64>, feats: &Array2<f64>| {
            adversarial_loss(&d.forward(feats).scores, &flags).unwrap()
        };
        let cache = d.forward(&feats);
        let glog = adversarial_loss_grad(&cache.scores, &flags);
        let mut grads = GradMap::new();
        let gfeats = d.backward(&cache, &glog, &mut grads);

        let eps = 1e-6;
        let fd = {
            let mut dp = d.clone();
            dp.l1.w[[2, 3]] += eps;
            let mut dm = d.clone();
            dm.l1.w[[2, 3]] -= eps;
            (loss(&dp, &feats) - loss(&dm, &feats)) / (2.0 * eps)
        };
        let an = grads.get("disc.l1.w").unwrap()[[2, 3]];
        assert!((fd - an).abs() / fd.abs().max(1e-3) < 1e-4);

        let fd = {
            let mut fp = feats.clone();
            fp[[1, 4]] += eps;
            let mut fm = feats.clone();
            fm[[1, 4]] -= eps;
            (loss(&d, &fp) - loss(&d, &fm)) / (2.0 * eps)
        };
        assert!((fd - gfeats[[1, 4]]).abs() / fd.abs().max(1e-3) < 1e-4);
    }

    #[test]
    fn lambda_ramp_shape() {
        let ramp = LambdaSchedule::Ramp { ceiling: 1.0 };
        assert!(ramp.value_at(0.0).abs() < 1e-12);
        assert!((ramp.value_at(1.0) - 0.9999).abs() < 1e-3);
        assert!(ramp.value_at(0.5) > 0.9);
        let fixed = LambdaSchedule::Fixed { value: 0.3 };
        assert_eq!(fixed.value_at(0.0), 0.3);
        assert_eq!(fixed.value_at(1.0), 0.3);
    }
}
