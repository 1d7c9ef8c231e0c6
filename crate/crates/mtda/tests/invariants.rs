//! Property tests for the data-path and loss-function invariants.

use mtda::curriculum::PseudoSourceLedger;
use mtda::data::{make_synthetic, EpochCursor, SampleKey};
use mtda::heads::{aggregation_weights, build_edge_targets, EdgeNet};
use mtda::losses::{bce_edge, masked_cross_entropy};
use mtda::nnet::{softmax_rows, stream_rng};
use ndarray::Array2;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Over any whole number of epochs, every element is drawn equally often;
    /// mid-epoch the counts differ by at most one.
    #[test]
    fn epoch_cursor_draws_are_balanced(len in 1usize..40, epochs in 1usize..5, extra in 0usize..39, seed in 0u64..1000) {
        let extra = extra.min(len.saturating_sub(1));
        let mut cursor = EpochCursor::new(len, stream_rng(seed, "prop"));
        let mut counts = vec![0usize; len];
        for _ in 0..len * epochs + extra {
            counts[cursor.next()] += 1;
        }
        let lo = *counts.iter().min().unwrap();
        let hi = *counts.iter().max().unwrap();
        prop_assert!(hi - lo <= 1, "counts {counts:?}");
    }

    /// Edge targets equal the brute-force pair enumeration and are symmetric
    /// with a unit diagonal.
    #[test]
    fn edge_targets_match_brute_force(labels in prop::collection::vec(0usize..5, 2..12)) {
        let classes: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        let t = build_edge_targets::<f64>(&classes).unwrap();
        for i in 0..labels.len() {
            prop_assert_eq!(t.values[[i, i]], 1.0);
            for j in 0..labels.len() {
                let expect = if labels[i] == labels[j] { 1.0 } else { 0.0 };
                prop_assert_eq!(t.values[[i, j]], expect);
                prop_assert_eq!(t.values[[i, j]], t.values[[j, i]]);
            }
        }
    }

    /// The edge loss equals an explicit per-pair BCE loop.
    #[test]
    fn bce_edge_matches_pair_loop(
        labels in prop::collection::vec(0usize..4, 5..6),
        probs in prop::collection::vec(0.01f64..0.99, 25..26),
    ) {
        let classes: Vec<Option<usize>> = labels.iter().map(|&l| Some(l)).collect();
        let t = build_edge_targets::<f64>(&classes).unwrap();
        let aff = Array2::from_shape_vec((5, 5), probs).unwrap();
        let fast = bce_edge(&aff, &t).unwrap();
        let mut total = 0.0;
        let mut n = 0usize;
        for i in 0..5 {
            for j in 0..5 {
                if i == j { continue; }
                let p: f64 = aff[[i, j]];
                let tv = if labels[i] == labels[j] { 1.0 } else { 0.0 };
                total -= tv * p.ln() + (1.0 - tv) * (1.0 - p).ln();
                n += 1;
            }
        }
        prop_assert!((fast - total / n as f64).abs() <= 1e-8);
    }

    /// Softmax rows are probability vectors; cross-entropy is nonnegative.
    #[test]
    fn softmax_and_ce_are_well_formed(
        vals in prop::collection::vec(-30.0f64..30.0, 12..13),
        label in 0usize..4,
    ) {
        let logits = Array2::from_shape_vec((3, 4), vals).unwrap();
        let p = softmax_rows(&logits);
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
        let classes = vec![Some(label); 3];
        let ce = masked_cross_entropy(&logits, &classes, &[true, true, true]).unwrap();
        prop_assert!(ce.is_finite() && ce >= 0.0);
    }

    /// Affinity rows always renormalize to exactly one after the forced
    /// self-loop.
    #[test]
    fn aggregation_rows_sum_to_one(vals in prop::collection::vec(0.001f64..0.999, 36..37)) {
        let aff = Array2::from_shape_vec((6, 6), vals).unwrap();
        let an = aggregation_weights(&aff);
        for row in an.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
        }
    }

    /// The ledger never admits duplicates or sub-threshold confidences, and
    /// its size is non-decreasing under arbitrary admission sequences.
    #[test]
    fn ledger_admission_invariants(
        adds in prop::collection::vec((0usize..3, 0usize..30, 0usize..4, 0.0f64..1.0), 0..60),
        tau in 0.2f64..0.9,
    ) {
        let reg = make_synthetic(4, 3, &[0.1, 0.2, 0.3], 10, 1).unwrap();
        let mut ledger = PseudoSourceLedger::from_source(&reg);
        let mut size = ledger.len();
        for (pass, (dom, idx, label, conf)) in adds.iter().enumerate() {
            let key = SampleKey { domain_id: dom + 1, index: *idx };
            let added = ledger.try_add(key, *label, *conf, tau, pass + 1, pass);
            if added {
                prop_assert!(*conf > tau);
            }
            prop_assert!(ledger.len() >= size);
            size = ledger.len();
        }
        ledger.check_invariants(tau).unwrap();
    }
}

/// The affinity matrix of a randomly initialized edge net stays within (0,1)
/// and symmetric under feature exchange.
#[test]
fn edge_affinity_symmetry_random_instances() {
    let mut rng = stream_rng(77, "edge-sym");
    for trial in 0..20 {
        let edge = EdgeNet::<f64>::init(16, trial);
        let feats = Array2::from_shape_fn((6, 16), |_| mtda::nnet::normal::<f64>(&mut rng));
        let cache = edge.forward(&feats).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                let a = cache.affinity[[i, j]];
                assert!(a > 0.0 && a < 1.0);
                assert!((a - cache.affinity[[j, i]]).abs() <= 1e-6);
            }
        }
    }
}
