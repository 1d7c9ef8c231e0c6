//! The persisted-run workflow driven through the same code paths as the CLI:
//! configure, train, then render the report table from the manifest.
//!
//! Equivalent shell session:
//!
//! ```bash
//! mtda train --synthetic n_c=4 N=3 shifts=0.1,0.3,0.6 per_class=40 \
//!      --K 300 --Kstar 3 --Bs 48 --Bt 16 --tau 0.7 --seed 7 --out /tmp/mtda-run
//! mtda report /tmp/mtda-run
//! ```

use mtda::cli::{apply_override, cmd_report, cmd_train, RunConfig};

fn main() -> mtda::Result<()> {
    let out = tempfile::tempdir().expect("tempdir");
    let mut config = RunConfig::default();
    config.out_dir = out.path().join("run");
    apply_override(&mut config, "data.per_class", "40")?;
    apply_override(&mut config, "hyperparams.adapt_iters", "300")?;
    apply_override(&mut config, "hyperparams.finetune_iters", "100")?;
    apply_override(&mut config, "hyperparams.source_convergence.max_iters", "500")?;

    let manifest = cmd_train(&config)?;
    println!(
        "run complete: {} passes, final avg target accuracy {:.3}",
        manifest.passes.len(),
        manifest.final_eval.as_ref().map(|e| e.average).unwrap_or(f64::NAN)
    );

    println!("artifacts:");
    for entry in std::fs::read_dir(&config.out_dir).expect("run dir") {
        println!("  {}", entry.expect("entry").file_name().to_string_lossy());
    }

    println!("report (pass-by-pass pseudo-sample ingestion):");
    cmd_report(&config.out_dir)?;
    Ok(())
}
