use mtda::bench::{
    bench_batch_composition, confidence_thirds, first_pass_order, incorrect_ratio_increased,
    BenchCell, DeskSetup, RunCache,
};

fn main() -> mtda::Result<()> {
    let cache = RunCache::new();

    // criterion 7 arms under the final recipe
    let table = bench_batch_composition(&cache, &DeskSetup::default(), &[1, 2, 3], &[(32, 32), (48, 16)], 3)?;
    for col in &table.columns {
        eprintln!("final (Bs,Bt)=({}): mean {:.4} per-seed {:?}", col.label, col.mean_accuracy, col.per_seed);
    }

    // criterion 4/6: desk per-seed registries, K*=3
    let desk = DeskSetup::desk();
    for seed in [1u64, 2, 3] {
        let m = cache.get_or_run(&desk, &BenchCell::new(seed, 3))?;
        let b = m.baseline.as_ref().unwrap().average;
        let f = m.final_eval.as_ref().unwrap().average;
        let adds: Vec<Vec<usize>> = (1..=3)
            .map(|d| {
                m.passes
                    .iter()
                    .map(|p| p.visits.iter().find(|v| v.domain_id == d).map(|v| v.added).unwrap_or(0))
                    .collect()
            })
            .collect();
        eprintln!("desk seed {seed}: baseline {b:.3} final {f:.3} gain {:+.1} adds-per-domain {adds:?}", 100.0 * (f - b));
    }

    // criterion 3: first-pass order probes, 5 seeds
    let probe = DeskSetup::first_pass_probe();
    for seed in 1..=5u64 {
        let m = cache.get_or_run(&probe, &BenchCell::new(seed, 1))?;
        eprintln!("probe seed {seed}: first-pass order {:?}", first_pass_order(&m));
    }

    // criterion 8: confidence-quality thirds, 2 seeds
    let cq = DeskSetup::confidence_quality();
    let mut first = (0i64, 0i64);
    let mut last = (0i64, 0i64);
    for seed in [1u64, 2] {
        let m = cache.get_or_run(&cq, &BenchCell::new(seed, 1))?;
        let (f, l) = confidence_thirds(&m);
        eprintln!("cq seed {seed}: first {f:?} last {l:?}");
        first.0 += f.0; first.1 += f.1; last.0 += l.0; last.1 += l.1;
    }
    eprintln!("cq aggregate: first {first:?} last {last:?} increased={}", incorrect_ratio_increased(first, last));
    Ok(())
}
