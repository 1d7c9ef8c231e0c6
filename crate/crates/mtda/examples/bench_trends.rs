//! Scaled-down run of the benchmark suite: reiteration-count and
//! batch-composition sweeps on a fixed synthetic registry, with the CSV
//! table layouts.
//!
//! The full-size suite (the one the acceptance tests run) takes tens of
//! minutes; this demo shrinks the iteration counts to finish in a few
//! minutes while exercising the same machinery.
//!
//! ```bash
//! cargo run --release --example bench_trends
//! ```

use mtda::bench::{bench_batch_composition, bench_reiteration, DeskSetup, RunCache};

fn main() -> mtda::Result<()> {
    let setup = DeskSetup {
        per_class: 60,
        adapt_iters: 300,
        finetune_iters: 100,
        ..DeskSetup::default()
    };
    let cache = RunCache::new();
    let seeds = [1u64, 2];

    let started = std::time::Instant::now();
    let table = bench_reiteration(&cache, &setup, &seeds, &[1, 3])?;
    println!("reiteration sweep ({:.0?}):", started.elapsed());
    print!("{}", table.to_csv());
    for col in &table.columns {
        println!("  K*={}: per-seed {:?}", col.label, col.per_seed);
    }

    let started = std::time::Instant::now();
    let table = bench_batch_composition(&cache, &setup, &seeds, &[(32, 32), (48, 16)], 3)?;
    println!("batch-composition sweep ({:.0?}):", started.elapsed());
    print!("{}", table.to_csv());
    for col in &table.columns {
        println!("  (B_s,B_t)=({}): per-seed {:?}", col.label, col.per_seed);
    }
    Ok(())
}
