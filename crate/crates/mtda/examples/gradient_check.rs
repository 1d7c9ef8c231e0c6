//! Verify analytic gradients against central finite differences in f64:
//! the conv backbone, the graph head (through affinity aggregation), and the
//! gradient reversal identity.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use mtda::adversarial::{adversarial_loss, adversarial_loss_grad, Grl};
use mtda::backbone::{Backbone, BackboneSpec};
use mtda::heads::{EdgeNet, NodeNet};
use mtda::nnet::{normal, stream_rng, GradMap, Mode};
use ndarray::{Array2, Array4};

fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(1e-8)
}

fn main() -> mtda::Result<()> {
    let mut rng = stream_rng(3, "gradient-check");

    // --- small conv backbone, three-parameter probe -----------------------
    let spec = BackboneSpec::small(16, [4, 6, 8]);
    let backbone = Backbone::<f64>::init(&spec, 11, 32)?;
    let x = Array4::from_shape_fn((4, 3, 16, 16), |_| normal::<f64>(&mut rng) * 0.3 + 0.5);
    let loss = |bb: &Backbone<f64>, x: &Array4<f64>| {
        let mut bb = bb.clone();
        let (f, _) = bb.forward(x, Mode::Train).unwrap();
        f.mapv(|v| v * v).sum()
    };
    let (f, cache) = backbone.clone().forward(&x, Mode::Train)?;
    let gf = f.mapv(|v| 2.0 * v);
    let mut grads = GradMap::new();
    backbone.backward(&cache, &gf, &mut grads);

    let eps = 1e-5;
    let probes = [
        ("backbone.conv1.w", [0usize, 0, 1, 1]),
        ("backbone.conv3.w", [2, 3, 0, 2]),
        ("backbone.bn.gamma", [3, 0, 0, 0]),
    ];
    for (name, idx) in probes {
        let bump = |bb: &mut Backbone<f64>, delta: f64| {
            let Backbone::Small(s) = bb else { unreachable!() };
            match name {
                "backbone.conv1.w" => s.conv1.w[idx] += delta,
                "backbone.conv3.w" => s.conv3.w[idx] += delta,
                _ => s.bn.gamma[idx[0]] += delta,
            }
        };
        let mut bp = backbone.clone();
        bump(&mut bp, eps);
        let mut bm = backbone.clone();
        bump(&mut bm, -eps);
        let fd = (loss(&bp, &x) - loss(&bm, &x)) / (2.0 * eps);
        let g = grads.get(name).unwrap();
        let an = if name == "backbone.bn.gamma" { g[[idx[0]]] } else { g[idx] };
        println!("{name}: finite-diff {fd:+.6e}  analytic {an:+.6e}  rel.err {:.2e}", rel_err(fd, an));
        assert!(rel_err(fd, an) <= 1e-3);
    }

    // --- graph head through the aggregation path --------------------------
    let edge = EdgeNet::<f64>::init(6, 31);
    let node = NodeNet::<f64>::init(6, 3, 32);
    let feats = Array2::from_shape_fn((5, 6), |_| normal::<f64>(&mut rng));
    let graph_loss = |feats: &Array2<f64>| {
        let ec = edge.forward(feats).unwrap();
        let (logits, _) = node.forward(feats, &ec.affinity).unwrap();
        logits.mapv(|v| v * v).sum()
    };
    let ec = edge.forward(&feats)?;
    let (logits, ncache) = node.forward(&feats, &ec.affinity)?;
    let mut grads = GradMap::new();
    let (gfeats_node, gaff) = node.backward(&feats, &ncache, &logits.mapv(|v| 2.0 * v), &mut grads);
    let gscores = ndarray::Zip::from(&gaff)
        .and(&ec.affinity)
        .map_collect(|&g, &a| g * a * (1.0 - a));
    let gfeats = &gfeats_node + &edge.backward(&ec, &gscores, &mut grads);
    let mut fp = feats.clone();
    fp[[2, 3]] += eps;
    let mut fm = feats.clone();
    fm[[2, 3]] -= eps;
    let fd = (graph_loss(&fp) - graph_loss(&fm)) / (2.0 * eps);
    println!(
        "graph head feats[2,3]: finite-diff {fd:+.6e}  analytic {:+.6e}  rel.err {:.2e}",
        gfeats[[2, 3]],
        rel_err(fd, gfeats[[2, 3]])
    );
    assert!(rel_err(fd, gfeats[[2, 3]]) <= 1e-3);

    // --- gradient reversal: backward equals -lambda x identity ------------
    let lambda = 0.6;
    let grl = Grl::new(lambda);
    let scores = ndarray::Array1::from_vec(vec![0.8, 0.3, 0.55]);
    let flags = [1u8, 0, 1];
    let l = adversarial_loss(&scores, &flags)?;
    let g = adversarial_loss_grad(&scores, &flags);
    let reversed = grl.backward(&Array2::from_shape_fn((1, 3), |(_, j)| g[j]));
    for j in 0..3 {
        assert!((reversed[[0, j]] + lambda * g[j]).abs() < 1e-15);
    }
    println!("grl: loss {l:.4}, backward = -{lambda} x upstream gradient verified");
    println!("all gradient checks passed");
    Ok(())
}
