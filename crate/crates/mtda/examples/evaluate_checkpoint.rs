//! Train briefly, checkpoint, reload, and confirm the reloaded model
//! reproduces the run's final numbers exactly — plus single-sample inference
//! with the MLP head.
//!
//! ```bash
//! cargo run --release --example evaluate_checkpoint
//! ```

use mtda::backbone::BackboneSpec;
use mtda::curriculum::{run, HyperParams, RunSinks};
use mtda::data::make_synthetic;
use mtda::eval::{evaluate, predict};
use mtda::model::ModelBundle;
use mtda::trainer::Trainer;

fn main() -> mtda::Result<()> {
    let dir = tempfile::tempdir().expect("tempdir");
    let registry = make_synthetic(4, 2, &[0.2, 0.5], 40, 3)?;
    let hp = HyperParams {
        adapt_iters: 200,
        reiterations: 2,
        finetune_iters: 50,
        seed: 3,
        source_convergence: mtda::curriculum::SourceConvergence {
            max_iters: 400,
            ..Default::default()
        },
        ..HyperParams::default()
    };
    let spec = BackboneSpec::small(48, [8, 16, 32]);
    let bundle = ModelBundle::<f32>::init(&spec, registry.n_c, 32, hp.seed)?;
    let mut trainer = Trainer::new(bundle, &hp);
    let sinks = RunSinks {
        metrics: None,
        checkpoint_dir: Some(dir.path().to_path_buf()),
    };
    let outcome = run(&mut trainer, &registry, &hp, "train", sinks)?;
    let trained_avg = outcome.manifest.final_eval.as_ref().unwrap().average;
    println!("trained: avg target accuracy {trained_avg:.4}");

    // reload the final checkpoint and evaluate again
    let ckpt = dir.path().join("checkpoint_final.json");
    let mut reloaded = ModelBundle::<f32>::load(&ckpt)?;
    let report = evaluate(&mut reloaded, &registry, None)?;
    println!("reloaded: avg target accuracy {:.4}", report.average_target_accuracy);
    assert_eq!(report.average_target_accuracy, trained_avg, "checkpoint reproduces the run");

    // MLP-head inference needs no batch context: single samples work
    let one = predict(&mut reloaded, &[&registry.target(1)[0]])?;
    println!("single-sample prediction: class {}", one[0]);

    // pass-boundary checkpoints exist too
    for pass in 1..=hp.reiterations {
        let path = dir.path().join(format!("checkpoint_pass_{pass:02}.json"));
        println!("checkpoint at pass {pass}: {} bytes", std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0));
    }
    Ok(())
}
