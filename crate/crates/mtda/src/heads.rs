//! The dual classifier head: a per-sample MLP classifier and a graph
//! classifier built from an edge network (pairwise affinities over the batch)
//! and a node classifier (affinity-aggregated features).

use ndarray::{Array1, Array2, ArrayViewMutD, Axis};

use crate::backbone::FeatureMatrix;
use crate::error::{Error, Result};
use crate::nnet::{
    dyn1, dyn2, relu, relu_backward, sigmoid, stream_rng, GradMap, Linear, Real,
};

/// Pre-softmax class scores, `[B, n_c]`.
pub type LogitMatrix<F> = Array2<F>;

/// Pairwise affinities after the sigmoid, `[B, B]`, entries in (0, 1).
pub type AffinityMatrix<F> = Array2<F>;

/// Supervision for the edge loss: `values[i][j] = 1` iff samples i and j share
/// a class (true labels on ledger rows, MLP pseudo-labels on target rows);
/// `mask` marks pairs where both labels are defined.
#[derive(Debug, Clone)]
pub struct EdgeTargets<F: Real> {
    pub values: Array2<F>,
    pub mask: Array2<bool>,
}

/// Single fully connected layer, 256 -> n_c.
#[derive(Debug, Clone)]
pub struct MlpHead<F: Real> {
    pub fc: Linear<F>,
}

impl<F: Real> MlpHead<F> {
    pub fn init(d_f: usize, n_c: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "head-mlp");
        Self {
            fc: Linear::xavier(d_f, n_c, &mut rng),
        }
    }

    pub fn forward(&self, feats: &FeatureMatrix<F>) -> LogitMatrix<F> {
        self.fc.forward(feats)
    }

    /// Returns grad wrt features and accumulates `mlp.*` parameter grads.
    pub fn backward(
        &self,
        feats: &FeatureMatrix<F>,
        glogits: &Array2<F>,
        grads: &mut GradMap<F>,
    ) -> Array2<F> {
        let (gfeats, g) = self.fc.backward(feats, glogits);
        grads.add("mlp.fc.w", dyn2(g.w));
        grads.add("mlp.fc.b", dyn1(g.b));
        gfeats
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        vec![
            ("mlp.fc.w".to_string(), self.fc.w.view_mut().into_dyn()),
            ("mlp.fc.b".to_string(), self.fc.b.view_mut().into_dyn()),
        ]
    }
}

// ---------------------------------------------------------------------------
// Edge network
// ---------------------------------------------------------------------------

/// Per-pair scorer over |f_i - f_j|: three 1x1 stages d_f -> d_f -> d_f/2 -> 1,
/// sigmoid at the end. Realized as per-pair fully connected layers, which is
/// exactly what 1x1 convolutions over the pair grid compute.
#[derive(Debug, Clone)]
pub struct EdgeNet<F: Real> {
    pub l1: Linear<F>,
    pub l2: Linear<F>,
    pub l3: Linear<F>,
}

pub struct EdgeCache<F: Real> {
    pairs: Array2<F>,      // [B*B, d_f] absolute differences
    signs: Array2<F>,      // sign(f_i - f_j) per pair
    z1: Array2<F>,
    a1: Array2<F>,
    z2: Array2<F>,
    a2: Array2<F>,
    pub scores: Array2<F>, // pre-sigmoid [B, B]
    pub affinity: AffinityMatrix<F>,
}

impl<F: Real> EdgeNet<F> {
    pub fn init(d_f: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "head-edge");
        Self {
            l1: Linear::he(d_f, d_f, &mut rng),
            l2: Linear::he(d_f, d_f / 2, &mut rng),
            l3: Linear::xavier(d_f / 2, 1, &mut rng),
        }
    }

    /// Affinity matrix for a batch of features; errors on batches of size < 2.
    pub fn forward(&self, feats: &FeatureMatrix<F>) -> Result<EdgeCache<F>> {
        let b = feats.nrows();
        if b < 2 {
            return Err(Error::Contract(format!(
                "edge network needs at least 2 samples, got {b}"
            )));
        }
        let d = feats.ncols();
        let mut pairs = Array2::<F>::zeros((b * b, d));
        let mut signs = Array2::<F>::zeros((b * b, d));
        for i in 0..b {
            for j in 0..b {
                let row = i * b + j;
                for k in 0..d {
                    let diff = feats[[i, k]] - feats[[j, k]];
                    pairs[[row, k]] = diff.abs();
                    signs[[row, k]] = if diff > F::zero() {
                        F::one()
                    } else if diff < F::zero() {
                        -F::one()
                    } else {
                        F::zero()
                    };
                }
            }
        }
        let z1 = self.l1.forward(&pairs);
        let a1 = relu(&z1);
        let z2 = self.l2.forward(&a1);
        let a2 = relu(&z2);
        let z3 = self.l3.forward(&a2); // [B*B, 1]
        let scores = z3
            .into_shape_with_order((b, b))
            .expect("pair score reshape");
        let affinity = scores.mapv(sigmoid);
        Ok(EdgeCache {
            pairs,
            signs,
            z1,
            a1,
            z2,
            a2,
            scores,
            affinity,
        })
    }

    /// Backward from a gradient on the pre-sigmoid scores. Accumulates
    /// `edge.*` parameter grads; returns grad wrt the feature matrix.
    pub fn backward(
        &self,
        cache: &EdgeCache<F>,
        gscores: &Array2<F>,
        grads: &mut GradMap<F>,
    ) -> Array2<F> {
        let b = gscores.nrows();
        let d = cache.pairs.ncols();
        let gz3 = gscores
            .view()
            .into_shape_with_order((b * b, 1))
            .expect("pair grad reshape")
            .to_owned();
        let (ga2, g3) = self.l3.backward(&cache.a2, &gz3);
        grads.add("edge.l3.w", dyn2(g3.w));
        grads.add("edge.l3.b", dyn1(g3.b));
        let gz2 = relu_backward(&cache.z2, &ga2);
        let (ga1, g2) = self.l2.backward(&cache.a1, &gz2);
        grads.add("edge.l2.w", dyn2(g2.w));
        grads.add("edge.l2.b", dyn1(g2.b));
        let gz1 = relu_backward(&cache.z1, &ga1);
        let (gpairs, g1) = self.l1.backward(&cache.pairs, &gz1);
        grads.add("edge.l1.w", dyn2(g1.w));
        grads.add("edge.l1.b", dyn1(g1.b));
        // |f_i - f_j| backward: sign routes the gradient to both endpoints
        let mut gfeats = Array2::<F>::zeros((b, d));
        for i in 0..b {
            for j in 0..b {
                let row = i * b + j;
                for k in 0..d {
                    let g = gpairs[[row, k]] * cache.signs[[row, k]];
                    gfeats[[i, k]] = gfeats[[i, k]] + g;
                    gfeats[[j, k]] = gfeats[[j, k]] - g;
                }
            }
        }
        gfeats
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        vec![
            ("edge.l1.w".to_string(), self.l1.w.view_mut().into_dyn()),
            ("edge.l1.b".to_string(), self.l1.b.view_mut().into_dyn()),
            ("edge.l2.w".to_string(), self.l2.w.view_mut().into_dyn()),
            ("edge.l2.b".to_string(), self.l2.b.view_mut().into_dyn()),
            ("edge.l3.w".to_string(), self.l3.w.view_mut().into_dyn()),
            ("edge.l3.b".to_string(), self.l3.b.view_mut().into_dyn()),
        ]
    }
}

// ---------------------------------------------------------------------------
// Node classifier
// ---------------------------------------------------------------------------

/// Classifier over concat(self, affinity-aggregated neighbors):
/// 2*d_f -> 2*n_c -> n_c, per Table-1 widths.
#[derive(Debug, Clone)]
pub struct NodeNet<F: Real> {
    pub l1: Linear<F>,
    pub l2: Linear<F>,
}

pub struct NodeCache<F: Real> {
    anorm: Array2<F>,
    row_sums: Array1<F>,
    concat: Array2<F>,
    z1: Array2<F>,
    a1: Array2<F>,
}

impl<F: Real> NodeNet<F> {
    pub fn init(d_f: usize, n_c: usize, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "head-node");
        Self {
            l1: Linear::he(2 * d_f, 2 * n_c, &mut rng),
            l2: Linear::xavier(2 * n_c, n_c, &mut rng),
        }
    }

    /// Aggregation matrix: affinity with the diagonal forced to 1, rows
    /// normalized to sum 1 (a convex combination over the batch).
    fn normalize(aff: &AffinityMatrix<F>) -> (Array2<F>, Array1<F>) {
        let b = aff.nrows();
        let mut a = aff.clone();
        for i in 0..b {
            a[[i, i]] = F::one();
        }
        let sums = a.sum_axis(Axis(1));
        for (mut row, &s) in a.rows_mut().into_iter().zip(sums.iter()) {
            debug_assert!(s > F::zero(), "row sum positive by construction");
            row.mapv_inplace(|v| v / s);
        }
        (a, sums)
    }

    pub fn forward(
        &self,
        feats: &FeatureMatrix<F>,
        aff: &AffinityMatrix<F>,
    ) -> Result<(LogitMatrix<F>, NodeCache<F>)> {
        let b = feats.nrows();
        if aff.dim() != (b, b) {
            return Err(Error::Contract(format!(
                "affinity must be {b}x{b}, got {:?}",
                aff.dim()
            )));
        }
        let (anorm, row_sums) = Self::normalize(aff);
        let agg = anorm.dot(feats); // [B, d_f]
        let d = feats.ncols();
        let mut concat = Array2::<F>::zeros((b, 2 * d));
        concat.slice_mut(ndarray::s![.., ..d]).assign(feats);
        concat.slice_mut(ndarray::s![.., d..]).assign(&agg);
        let z1 = self.l1.forward(&concat);
        let a1 = relu(&z1);
        let logits = self.l2.forward(&a1);
        Ok((
            logits,
            NodeCache {
                anorm,
                row_sums,
                concat,
                z1,
                a1,
            },
        ))
    }

    /// Backward from node-logit grads. Returns (grad wrt features, grad wrt
    /// the *pre-normalization* affinity matrix); accumulates `node.*` grads.
    /// The diagonal of the affinity gradient is zero because the self-loop is
    /// forced before normalization.
    pub fn backward(
        &self,
        feats: &FeatureMatrix<F>,
        cache: &NodeCache<F>,
        glogits: &Array2<F>,
        grads: &mut GradMap<F>,
    ) -> (Array2<F>, Array2<F>) {
        let b = feats.nrows();
        let d = feats.ncols();
        let (ga1, g2) = self.l2.backward(&cache.a1, glogits);
        grads.add("node.l2.w", dyn2(g2.w));
        grads.add("node.l2.b", dyn1(g2.b));
        let gz1 = relu_backward(&cache.z1, &ga1);
        let (gconcat, g1) = self.l1.backward(&cache.concat, &gz1);
        grads.add("node.l1.w", dyn2(g1.w));
        grads.add("node.l1.b", dyn1(g1.b));
        let gself = gconcat.slice(ndarray::s![.., ..d]).to_owned();
        let gagg = gconcat.slice(ndarray::s![.., d..]).to_owned();
        // agg = Anorm · feats
        let ganorm = gagg.dot(&feats.t()); // [B, B]
        let mut gfeats = cache.anorm.t().dot(&gagg); // neighbor path
        gfeats += &gself;
        // row normalization backward: An[i,j] = A'[i,j] / S_i
        let mut gaff = Array2::<F>::zeros((b, b));
        for i in 0..b {
            let mut dot = F::zero();
            for k in 0..b {
                dot = dot + ganorm[[i, k]] * cache.anorm[[i, k]];
            }
            for j in 0..b {
                if i == j {
                    continue; // diagonal was overwritten with the forced self-loop
                }
                gaff[[i, j]] = (ganorm[[i, j]] - dot) / cache.row_sums[i];
            }
        }
        (gfeats, gaff)
    }

    pub fn param_entries_mut(&mut self) -> Vec<(String, ArrayViewMutD<'_, F>)> {
        vec![
            ("node.l1.w".to_string(), self.l1.w.view_mut().into_dyn()),
            ("node.l1.b".to_string(), self.l1.b.view_mut().into_dyn()),
            ("node.l2.w".to_string(), self.l2.w.view_mut().into_dyn()),
            ("node.l2.b".to_string(), self.l2.b.view_mut().into_dyn()),
        ]
    }
}

/// Row-normalized aggregation weights with forced self-loop, exposed for
/// invariant checks.
pub fn aggregation_weights<F: Real>(aff: &AffinityMatrix<F>) -> Array2<F> {
    NodeNet::<F>::normalize(aff).0
}

/// Build edge-loss supervision from per-row classes. Every row must carry a
/// class at this point (true ledger labels or MLP pseudo-labels).
pub fn build_edge_targets<F: Real>(classes: &[Option<usize>]) -> Result<EdgeTargets<F>> {
    let b = classes.len();
    let mut resolved = Vec::with_capacity(b);
    for (i, c) in classes.iter().enumerate() {
        match c {
            Some(c) => resolved.push(*c),
            None => {
                return Err(Error::Contract(format!(
                    "row {i} has no label; pseudo-label target rows before building edge targets"
                )))
            }
        }
    }
    let mut values = Array2::<F>::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            if resolved[i] == resolved[j] {
                values[[i, j]] = F::one();
            }
        }
    }
    Ok(EdgeTargets {
        values,
        mask: Array2::from_elem((b, b), true),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nnet::{normal, softmax_rows, stream_rng};
    use rand::Rng;

    #[test]
    fn mlp_zero_weights_give_uniform_softmax() {
        let mut head = MlpHead::<f64>::init(256, 4, 1);
        head.fc.w.fill(0.0);
        head.fc.b.fill(0.0);
        let feats = Array2::from_elem((6, 256), 0.3);
        let p = softmax_rows(&head.forward(&feats));
        for v in p.iter() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn mlp_shape_matches_class_count() {
        let head = MlpHead::<f32>::init(256, 65, 1);
        let feats = Array2::from_elem((64, 256), 0.1);
        assert_eq!(head.forward(&feats).dim(), (64, 65));
    }

    #[test]
    fn mlp_is_per_sample() {
        let head = MlpHead::<f64>::init(16, 3, 5);
        let mut rng = stream_rng(2, "mlp");
        let feats = Array2::from_shape_fn((5, 16), |_| normal::<f64>(&mut rng));
        let logits = head.forward(&feats);
        // permute rows -> logits permute identically
        let perm = [3usize, 0, 4, 1, 2];
        let permuted = Array2::from_shape_fn((5, 16), |(i, j)| feats[[perm[i], j]]);
        let plogits = head.forward(&permuted);
        for i in 0..5 {
            for c in 0..3 {
                assert_eq!(plogits[[i, c]], logits[[perm[i], c]]);
            }
        }
    }

    #[test]
    fn edge_affinity_symmetric_for_identical_architecture() {
        let edge = EdgeNet::<f64>::init(32, 3);
        let mut rng = stream_rng(4, "edge");
        let feats = Array2::from_shape_fn((8, 32), |_| normal::<f64>(&mut rng));
        let cache = edge.forward(&feats).unwrap();
        assert_eq!(cache.affinity.dim(), (8, 8));
        for i in 0..8 {
            for j in 0..8 {
                let a = cache.affinity[[i, j]];
                assert!(a > 0.0 && a < 1.0);
                assert!(
                    (a - cache.affinity[[j, i]]).abs() <= 1e-6,
                    "|A[i,j]-A[j,i]| at ({i},{j})"
                );
            }
        }
    }

    #[test]
    fn edge_identical_features_score_like_zero_pair() {
        let edge = EdgeNet::<f64>::init(16, 9);
        let mut feats = Array2::from_elem((3, 16), 0.0);
        feats.row_mut(2).fill(1.0);
        let cache = edge.forward(&feats).unwrap();
        // rows 0 and 1 identical: their pair score equals the zero-input score
        let zero_score = cache.scores[[0, 0]];
        assert!((cache.scores[[0, 1]] - zero_score).abs() < 1e-12);
    }

    #[test]
    fn edge_rejects_degenerate_batch() {
        let edge = EdgeNet::<f64>::init(8, 0);
        let feats = Array2::from_elem((1, 8), 0.5);
        assert!(edge.forward(&feats).is_err());
    }

    #[test]
    fn aggregation_rows_sum_to_one() {
        let mut rng = stream_rng(6, "agg");
        let aff = Array2::from_shape_fn((7, 7), |_| rng.random_range(0.01..0.99));
        let an = aggregation_weights::<f64>(&aff);
        for row in an.rows() {
            assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn node_self_aggregation_when_offdiag_zero() {
        let node = NodeNet::<f64>::init(8, 3, 2);
        let mut rng = stream_rng(7, "node");
        let feats = Array2::from_shape_fn((4, 8), |_| normal::<f64>(&mut rng));
        let aff = Array2::<f64>::zeros((4, 4)); // diagonal forced to 1 inside
        let (_, cache) = node.forward(&feats, &aff).unwrap();
        for i in 0..4 {
            for k in 0..8 {
                assert!((cache.concat[[i, k]] - cache.concat[[i, 8 + k]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn node_uniform_affinity_aggregates_to_mean() {
        let node = NodeNet::<f64>::init(4, 2, 2);
        let feats = Array2::from_shape_fn((3, 4), |(i, j)| (i * 4 + j) as f64);
        let aff = Array2::from_elem((3, 3), 1.0);
        let (_, cache) = node.forward(&feats, &aff).unwrap();
        let mean = feats.mean_axis(Axis(0)).unwrap();
        for i in 0..3 {
            for k in 0..4 {
                assert!((cache.concat[[i, 4 + k]] - mean[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn edge_targets_from_labels() {
        let t = build_edge_targets::<f64>(&[Some(0), Some(1), Some(0)]).unwrap();
        let expect = [[1.0, 0.0, 1.0], [0.0, 1.0, 0.0], [1.0, 0.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(t.values[[i, j]], expect[i][j]);
            }
        }
        assert!(t.mask.iter().all(|&m| m));

        let all_same = build_edge_targets::<f64>(&[Some(2); 4]).unwrap();
        assert!(all_same.values.iter().all(|&v| v == 1.0));

        // 5-label case counted by brute force: pairs {0,3} and {1,4} plus diagonal
        let t = build_edge_targets::<f64>(&[Some(2), Some(0), Some(1), Some(2), Some(0)]).unwrap();
        let ones = t.values.iter().filter(|&&v| v == 1.0).count();
        assert_eq!(ones, 9);

        assert!(build_edge_targets::<f64>(&[Some(0), None]).is_err());
    }

    #[test]
    fn edge_targets_match_brute_force_on_random_instances() {
        let mut rng = stream_rng(15, "edge-targets");
        for _ in 0..40 {
            let b = rng.random_range(2..10usize);
            let n_c = rng.random_range(2..5usize);
            let labels: Vec<Option<usize>> =
                (0..b).map(|_| Some(rng.random_range(0..n_c))).collect();
            let t = build_edge_targets::<f64>(&labels).unwrap();
            for i in 0..b {
                for j in 0..b {
                    let expect = if labels[i] == labels[j] { 1.0 } else { 0.0 };
                    assert_eq!(t.values[[i, j]], expect);
                    assert_eq!(t.values[[i, j]], t.values[[j, i]]);
                }
                assert_eq!(t.values[[i, i]], 1.0);
            }
        }
    }

    #[test]
    fn graph_head_gradcheck_f64() {
        // joint check through node -> aggregation -> edge -> |pairs| -> feats
        let d_f = 6;
        let n_c = 3;
        let edge = EdgeNet::<f64>::init(d_f, 31);
        let node = NodeNet::<f64>::init(d_f, n_c, 32);
        let mut rng = stream_rng(33, "graph-fd");
        let feats = Array2::from_shape_fn((5, d_f), |_| normal::<f64>(&mut rng));

        // scalar loss: sum of squares of node logits + sum of squares of affinity
        let loss = |feats: &Array2<f64>| {
            let ec = edge.forward(feats).unwrap();
            let (logits, _) = node.forward(feats, &ec.affinity).unwrap();
            logits.mapv(|v| v * v).sum() + ec.affinity.mapv(|v| v * v).sum()
        };

        let ec = edge.forward(&feats).unwrap();
        let (logits, nc) = node.forward(&feats, &ec.affinity).unwrap();
        let glogits = logits.mapv(|v| 2.0 * v);
        let mut grads = GradMap::new();
        let (gfeats_node, gaff_from_node) = node.backward(&feats, &nc, &glogits, &mut grads);
        // affinity-squared term grad wrt affinity
        let gaff_direct = ec.affinity.mapv(|v| 2.0 * v);
        let gaff = &gaff_from_node + &gaff_direct;
        // through the sigmoid to pre-sigmoid scores
        let gscores = ndarray::Zip::from(&gaff)
            .and(&ec.affinity)
            .map_collect(|&g, &a| g * a * (1.0 - a));
        let gfeats_edge = edge.backward(&ec, &gscores, &mut grads);
        let gfeats = &gfeats_node + &gfeats_edge;

        let eps = 1e-6;
        for &(i, k) in &[(0usize, 0usize), (4, 5), (2, 3)] {
            let mut fp = feats.clone();
            fp[[i, k]] += eps;
            let mut fm = feats.clone();
            fm[[i, k]] -= eps;
            let fd = (loss(&fp) - loss(&fm)) / (2.0 * eps);
            let an = gfeats[[i, k]];
            assert!(
                (fd - an).abs() / fd.abs().max(1e-2) < 1e-3,
                "feats[{i},{k}]: fd={fd} an={an}"
            );
        }
        // parameter probes
        let loss_p = |edge: &EdgeNet<f64>, node: &NodeNet<f64>| {
            let ec = edge.forward(&feats).unwrap();
            let (logits, _) = node.forward(&feats, &ec.affinity).unwrap();
            logits.mapv(|v| v * v).sum() + ec.affinity.mapv(|v| v * v).sum()
        };
        let fd = {
            let mut ep = edge.clone();
            ep.l1.w[[2, 3]] += eps;
            let mut em = edge.clone();
            em.l1.w[[2, 3]] -= eps;
            (loss_p(&ep, &node) - loss_p(&em, &node)) / (2.0 * eps)
        };
        let an = grads.get("edge.l1.w").unwrap()[[2, 3]];
        assert!((fd - an).abs() / fd.abs().max(1e-2) < 1e-3, "edge.l1.w fd={fd} an={an}");
        let fd = {
            let mut np = node.clone();
            np.l1.w[[1, 7]] += eps;
            let mut nm = node.clone();
            nm.l1.w[[1, 7]] -= eps;
            (loss_p(&edge, &np) - loss_p(&edge, &nm)) / (2.0 * eps)
        };
        let an = grads.get("node.l1.w").unwrap()[[1, 7]];
        assert!((fd - an).abs() / fd.abs().max(1e-2) < 1e-3, "node.l1.w fd={fd} an={an}");
    }
}
