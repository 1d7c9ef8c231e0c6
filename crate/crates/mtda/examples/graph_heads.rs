//! The dual-head mechanics on a toy batch: MLP logits, pairwise affinities,
//! edge supervision from labels + pseudo-labels, and affinity-aggregated node
//! classification.
//!
//! ```bash
//! cargo run --example graph_heads
//! ```

use mtda::heads::{aggregation_weights, build_edge_targets, EdgeNet, MlpHead, NodeNet};
use mtda::losses::{bce_edge, masked_cross_entropy};
use mtda::nnet::{argmax_rows, normal, softmax_rows, stream_rng};
use ndarray::Array2;

fn main() -> mtda::Result<()> {
    let d_f = 32;
    let n_c = 4;
    let batch = 8;
    let mut rng = stream_rng(5, "graph-heads-demo");

    // pretend-extractor features: two clusters so affinities have structure
    let feats = Array2::from_shape_fn((batch, d_f), |(i, j)| {
        let center = if i % 2 == 0 { 1.0 } else { -1.0 };
        center + 0.3 * normal::<f64>(&mut rng) + 0.01 * j as f64
    });

    let mlp = MlpHead::<f64>::init(d_f, n_c, 1);
    let edge = EdgeNet::<f64>::init(d_f, 2);
    let node = NodeNet::<f64>::init(d_f, n_c, 3);

    // MLP head: per-sample logits
    let logits = mlp.forward(&feats);
    let pseudo = argmax_rows(&logits);
    println!("mlp pseudo-labels: {pseudo:?}");

    // edge head: B x B affinity, symmetric in the features
    let ecache = edge.forward(&feats)?;
    println!("affinity[0] = {:?}", ecache.affinity.row(0).to_vec());

    // aggregation weights are a convex combination (rows sum to 1)
    let weights = aggregation_weights(&ecache.affinity);
    println!("aggregation row sums: {:?}", weights.sum_axis(ndarray::Axis(1)).to_vec());

    // first half of the batch plays the labeled ledger part, the rest uses
    // MLP pseudo-labels -- the feedback path from the MLP to the graph head
    let classes: Vec<Option<usize>> = (0..batch)
        .map(|i| if i < 4 { Some(i % n_c) } else { Some(pseudo[i]) })
        .collect();
    let targets = build_edge_targets::<f64>(&classes)?;
    let l_edge = bce_edge(&ecache.affinity, &targets)?;
    println!("edge bce against label-agreement targets: {l_edge:.4}");

    // node head classifies self + aggregated-neighbor features
    let (node_logits, _) = node.forward(&feats, &ecache.affinity)?;
    let probs = softmax_rows(&node_logits);
    println!("node prediction confidences: {:?}",
        probs.rows().into_iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).collect::<Vec<_>>());

    // supervised losses only see the labeled half
    let mask: Vec<bool> = (0..batch).map(|i| i < 4).collect();
    let l_node = masked_cross_entropy(&node_logits, &classes, &mask)?;
    let l_mlp = masked_cross_entropy(&logits, &classes, &mask)?;
    println!("masked ce: mlp {l_mlp:.4}, node {l_node:.4}");
    Ok(())
}
