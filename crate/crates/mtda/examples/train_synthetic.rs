//! End-to-end training on the synthetic benchmark through the library API:
//! source training, uncertainty-ordered reiterative adaptation, fine-tuning,
//! and a final evaluation against the source-only baseline.
//!
//! Scaled down to finish in about a minute; pass a seed to vary the run.
//!
//! ```bash
//! cargo run --release --example train_synthetic -- 7
//! ```

use mtda::backbone::BackboneSpec;
use mtda::curriculum::{run, HyperParams, RunSinks};
use mtda::data::make_synthetic;
use mtda::eval::evaluate;
use mtda::model::ModelBundle;
use mtda::trainer::Trainer;

fn main() -> mtda::Result<()> {
    let seed: u64 = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(7);

    let registry = make_synthetic(4, 3, &[0.1, 0.3, 0.6], 80, seed)?;
    let hp = HyperParams {
        adapt_iters: 600,
        reiterations: 3,
        finetune_iters: 200,
        seed,
        ..HyperParams::default()
    };
    let spec = BackboneSpec::small(64, [8, 16, 32]);
    let bundle = ModelBundle::<f32>::init(&spec, registry.n_c, 32, seed)?;
    let mut trainer = Trainer::new(bundle, &hp);

    let started = std::time::Instant::now();
    let outcome = run(&mut trainer, &registry, &hp, "train", RunSinks::default())?;
    let manifest = &outcome.manifest;
    println!("trained in {:.0?}", started.elapsed());
    println!(
        "source: {:.3} after {} iterations",
        manifest.source_training.source_accuracy, manifest.source_training.iterations
    );

    for pass in &manifest.passes {
        let order: Vec<usize> = pass.visits.iter().map(|v| v.domain_id).collect();
        println!(
            "pass {}: domain order {:?}, avg target accuracy {:.3}, ledger {}",
            pass.pass,
            order,
            pass.average_target_accuracy.unwrap_or(f64::NAN),
            pass.ledger_size_after
        );
    }

    let baseline = manifest.baseline.as_ref().expect("synthetic truth");
    let final_eval = manifest.final_eval.as_ref().expect("synthetic truth");
    println!(
        "baseline  (source-only): {:.3} per-domain {:?}",
        baseline.average, baseline.per_domain
    );
    println!(
        "adapted   (full method): {:.3} per-domain {:?}",
        final_eval.average, final_eval.per_domain
    );
    println!(
        "adaptation gain: {:+.2} points",
        100.0 * (final_eval.average - baseline.average)
    );

    // the full report with confusion counts and the ledger audit
    let report = evaluate(&mut trainer.bundle, &registry, Some(&outcome.ledger))?;
    println!("confusion (rows = truth):");
    for row in &report.confusion {
        println!("  {row:?}");
    }
    println!("ledger audit per (pass, domain): {:?}", report.ledger_audit);
    Ok(())
}
