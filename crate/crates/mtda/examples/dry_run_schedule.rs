//! Inspect the reiterative curriculum schedule without training anything:
//! the stub model answers instantly, so the full control flow — domain
//! selection, iteration budgeting, pseudo-source growth — runs in
//! milliseconds.
//!
//! ```bash
//! cargo run --example dry_run_schedule
//! ```

use mtda::curriculum::{run, HyperParams, RunSinks};
use mtda::data::make_synthetic;
use mtda::stub::StubModel;

fn main() -> mtda::Result<()> {
    let registry = make_synthetic(4, 3, &[0.1, 0.3, 0.6], 20, 7)?;
    let hp = HyperParams {
        adapt_iters: 1500,
        reiterations: 3,
        finetune_iters: 100,
        ..HyperParams::default()
    };

    let mut stub = StubModel::new(registry.n_c, hp.seed);
    let started = std::time::Instant::now();
    let outcome = run(&mut stub, &registry, &hp, "dry_run", RunSinks::default())?;
    let manifest = outcome.manifest;

    println!("dry run finished in {:.1?}", started.elapsed());
    println!(
        "domain sequence ({} visits): {:?}",
        manifest.schedule.domain_sequence.len(),
        manifest.schedule.domain_sequence
    );
    println!(
        "total adaptation iterations: {} (= N x K = {} x {})",
        manifest.schedule.total_adaptation_iterations,
        manifest.n_domains,
        hp.adapt_iters
    );
    for pass in &manifest.passes {
        let adds: Vec<(usize, usize)> = pass.visits.iter().map(|v| (v.domain_id, v.added)).collect();
        println!(
            "pass {}: (domain, added) {:?} -> ledger {}",
            pass.pass, adds, pass.ledger_size_after
        );
    }
    outcome.ledger.check_invariants(hp.tau)?;
    println!(
        "ledger invariants hold: {} origin + {} pseudo entries",
        outcome.ledger.origin_count(),
        outcome.ledger.len() - outcome.ledger.origin_count()
    );
    Ok(())
}
