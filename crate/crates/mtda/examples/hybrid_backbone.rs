//! The convolutional-stem + self-attention backbone behind the same extractor
//! interface as the small conv net: parameter accounting, attention
//! row-stochasticity, and width invariance.
//!
//! ```bash
//! cargo run --release --example hybrid_backbone
//! ```

use mtda::backbone::{extract, Backbone, BackboneKind, BackboneSpec, HybridBackbone};
use mtda::nnet::Mode;
use ndarray::{Array4, Axis};

fn main() -> mtda::Result<()> {
    let spec = BackboneSpec {
        kind: BackboneKind::HybridConvAttention,
        d_f: 256,
        stem_channels: 64,
        d_model: 64,
        encoder_blocks: 2,
        attn_heads: 4,
        mlp_dim: 128,
        ..BackboneSpec::default()
    };

    let mut hybrid = HybridBackbone::<f32>::build(&spec, 7, 32)?;
    println!("hybrid parameter count: {}", hybrid.param_count());

    let x = Array4::from_elem((4, 3, 32, 32), 0.5);
    let (feats, cache) = hybrid.forward(&x, Mode::Eval);
    println!("features: {:?} (bottleneck fixed at d_f regardless of depth)", feats.dim());

    for (b, attn) in cache.attn.iter().enumerate() {
        let rows = attn.sum_axis(Axis(3));
        let max_dev = rows
            .iter()
            .map(|s| (s - 1.0).abs())
            .fold(0.0f32, f32::max);
        println!("block {b}: attention rows sum to 1 (max deviation {max_dev:.2e})");
    }

    // the unified interface dispatches on the spec
    let mut unified = Backbone::<f32>::init(&spec, 7, 32)?;
    let f = extract(&mut unified, &x)?;
    assert_eq!(f.dim(), (4, 256));
    println!("unified extract(): {:?}", f.dim());

    // deeper stacks keep the output contract
    for blocks in [1usize, 3] {
        let spec = BackboneSpec {
            encoder_blocks: blocks,
            ..spec.clone()
        };
        let mut bb = Backbone::<f32>::init(&spec, 7, 32)?;
        let f = extract(&mut bb, &x)?;
        println!("{blocks} encoder blocks -> {:?}", f.dim());
    }
    Ok(())
}
