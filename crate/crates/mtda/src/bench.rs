//! Canned desk-scale experiment suite: reiteration-count and
//! batch-composition sweeps over the synthetic benchmark, plus the
//! confidence-quality instrument (prolonged single-pass adaptation).
//!
//! Cells never share mutable state; a cache deduplicates identical cells by
//! handing out read-only manifests.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::curriculum::{run, HyperParams, RunManifest, RunSinks};
use crate::data::make_synthetic;
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::trainer::Trainer;

/// Benchmark-wide constants; individual cells vary seed, K*, and batch split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeskSetup {
    /// Registry seed; `None` ties the registry to each cell's run seed so
    /// every seed is an independent end-to-end experiment.
    pub registry_seed: Option<u64>,
    pub n_classes: usize,
    pub shift_magnitudes: Vec<f64>,
    pub per_class: usize,
    /// Total adaptation iterations per domain (K).
    pub adapt_iters: usize,
    pub tau: f64,
    pub finetune_iters: usize,
    pub feature_width: usize,
    pub conv_channels: [usize; 3],
    /// Ceiling of the ramped adversarial weight.
    pub lambda_adv_ceiling: f64,
}

impl Default for DeskSetup {
    fn default() -> Self {
        Self {
            registry_seed: Some(11),
            n_classes: 4,
            shift_magnitudes: vec![0.1, 0.3, 0.6],
            per_class: 150,
            adapt_iters: 1500,
            tau: 0.7,
            finetune_iters: 500,
            feature_width: 64,
            conv_channels: [8, 16, 32],
            lambda_adv_ceiling: 0.5,
        }
    }
}

impl DeskSetup {
    /// The desk-scale experiment: per-seed registries, canonical ladder.
    pub fn desk() -> Self {
        Self {
            registry_seed: None,
            ..Self::default()
        }
    }

    /// Confidence-quality regime: harder ladder, higher threshold, one long
    /// pass so admissions keep trickling in over the whole adaptation.
    pub fn confidence_quality() -> Self {
        Self {
            registry_seed: None,
            shift_magnitudes: vec![0.5, 0.65, 0.8],
            adapt_iters: 3000,
            tau: 0.9,
            ..Self::default()
        }
    }

    /// A single curriculum pass with the desk per-visit budget (identical
    /// stream seeding to pass 1 of a K*=3 desk run).
    pub fn first_pass_probe() -> Self {
        Self {
            registry_seed: None,
            adapt_iters: 500,
            finetune_iters: 0,
            ..Self::default()
        }
    }

    pub fn hyperparams(&self, cell: &BenchCell) -> HyperParams {
        HyperParams {
            batch_source: cell.batch_source,
            batch_target: cell.batch_target,
            tau: self.tau,
            adapt_iters: self.adapt_iters,
            reiterations: cell.reiterations,
            finetune_iters: self.finetune_iters,
            seed: cell.seed,
            lambda_adv: crate::adversarial::LambdaSchedule::Ramp {
                ceiling: self.lambda_adv_ceiling,
            },
            ..HyperParams::default()
        }
    }
}

/// One benchmark cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCell {
    pub seed: u64,
    pub reiterations: usize,
    pub batch_source: usize,
    pub batch_target: usize,
}

impl BenchCell {
    pub fn new(seed: u64, reiterations: usize) -> Self {
        Self {
            seed,
            reiterations,
            batch_source: 48,
            batch_target: 16,
        }
    }

    pub fn with_batches(mut self, batch_source: usize, batch_target: usize) -> Self {
        self.batch_source = batch_source;
        self.batch_target = batch_target;
        self
    }
}

fn cell_key(setup: &DeskSetup, cell: &BenchCell) -> String {
    format!(
        "{}|{:?}",
        serde_json::to_string(setup).expect("serializes"),
        cell
    )
}

/// Execute one cell: fresh registry, fresh model, full training procedure.
pub fn run_cell(setup: &DeskSetup, cell: &BenchCell) -> Result<RunManifest> {
    let registry_seed = setup.registry_seed.unwrap_or(cell.seed);
    let reg = make_synthetic(
        setup.n_classes,
        setup.shift_magnitudes.len(),
        &setup.shift_magnitudes,
        setup.per_class,
        registry_seed,
    )?;
    let hp = setup.hyperparams(cell);
    hp.validate()?;
    let spec = BackboneSpec::small(setup.feature_width, setup.conv_channels);
    let bundle = ModelBundle::<f32>::init(&spec, reg.n_c, 32, cell.seed)?;
    let mut trainer = Trainer::new(bundle, &hp);
    let outcome = run(&mut trainer, &reg, &hp, "train", RunSinks::default())?;
    Ok(outcome.manifest)
}

/// Read-through cache of completed cells, safe to share across test threads.
#[derive(Default)]
pub struct RunCache {
    cells: Mutex<BTreeMap<String, Arc<RunManifest>>>,
}

impl RunCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_run(&self, setup: &DeskSetup, cell: &BenchCell) -> Result<Arc<RunManifest>> {
        let key = cell_key(setup, cell);
        if let Some(hit) = self.cells.lock().unwrap().get(&key) {
            return Ok(hit.clone());
        }
        let manifest = Arc::new(run_cell(setup, cell)?);
        self.cells
            .lock()
            .unwrap()
            .insert(key, manifest.clone());
        Ok(manifest)
    }
}

fn average_accuracy(manifest: &RunManifest) -> Result<f64> {
    manifest
        .final_eval
        .as_ref()
        .map(|e| e.average)
        .ok_or_else(|| Error::Contract("benchmark run produced no evaluation".into()))
}

/// One sweep column: a configuration with per-seed accuracies and their mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchColumn {
    pub label: String,
    pub per_seed: Vec<(u64, f64)>,
    pub mean_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchTable {
    /// First CSV header cell, e.g. `kstar` or `bs_bt`.
    pub axis: String,
    pub columns: Vec<BenchColumn>,
}

impl BenchTable {
    /// Two-row CSV mirroring the ablation-table layout: configuration row and
    /// mean-accuracy row.
    pub fn to_csv(&self) -> String {
        let mut header = self.axis.clone();
        let mut accs = String::from("accuracy");
        for col in &self.columns {
            header.push(',');
            header.push_str(&col.label);
            accs.push_str(&format!(",{:.4}", col.mean_accuracy));
        }
        format!("{header}\n{accs}\n")
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn column(&self, label: &str) -> Option<&BenchColumn> {
        self.columns.iter().find(|c| c.label == label)
    }
}

/// Accuracy versus reiteration count at equal total iterations.
pub fn bench_reiteration(
    cache: &RunCache,
    setup: &DeskSetup,
    seeds: &[u64],
    reiteration_counts: &[usize],
) -> Result<BenchTable> {
    let mut columns = Vec::new();
    for &kstar in reiteration_counts {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let manifest = cache.get_or_run(setup, &BenchCell::new(seed, kstar))?;
            per_seed.push((seed, average_accuracy(&manifest)?));
        }
        let mean = per_seed.iter().map(|(_, a)| a).sum::<f64>() / per_seed.len() as f64;
        columns.push(BenchColumn {
            label: kstar.to_string(),
            per_seed,
            mean_accuracy: mean,
        });
    }
    Ok(BenchTable {
        axis: "kstar".to_string(),
        columns,
    })
}

/// Accuracy versus minibatch composition (B_s, B_t) at fixed K*.
pub fn bench_batch_composition(
    cache: &RunCache,
    setup: &DeskSetup,
    seeds: &[u64],
    compositions: &[(usize, usize)],
    reiterations: usize,
) -> Result<BenchTable> {
    let mut columns = Vec::new();
    for &(bs, bt) in compositions {
        let mut per_seed = Vec::new();
        for &seed in seeds {
            let cell = BenchCell::new(seed, reiterations).with_batches(bs, bt);
            let manifest = cache.get_or_run(setup, &cell)?;
            per_seed.push((seed, average_accuracy(&manifest)?));
        }
        let mean = per_seed.iter().map(|(_, a)| a).sum::<f64>() / per_seed.len() as f64;
        columns.push(BenchColumn {
            label: format!("{bs},{bt}"),
            per_seed,
            mean_accuracy: mean,
        });
    }
    Ok(BenchTable {
        axis: "bs_bt".to_string(),
        columns,
    })
}

/// Summed would-be admission deltas over the first and final third of every
/// adaptation visit: `((corr_first, incorr_first), (corr_final, incorr_final))`.
///
/// Checkpoints are cumulative counts probed at one third, two thirds, and the
/// end of each visit, so the first third is the first checkpoint itself and
/// the final third is the difference of the last two.
pub fn confidence_thirds(manifest: &RunManifest) -> ((i64, i64), (i64, i64)) {
    let mut first = (0i64, 0i64);
    let mut last = (0i64, 0i64);
    for pass in &manifest.passes {
        for visit in &pass.visits {
            let cps = &visit.confidence_checkpoints;
            if cps.len() < 3 {
                continue;
            }
            let c = |i: usize| {
                (
                    cps[i].would_correct.unwrap_or(0) as i64,
                    cps[i].would_incorrect.unwrap_or(0) as i64,
                )
            };
            let (c0, i0) = c(0);
            let (c1, i1) = c(1);
            let (c2, i2) = c(2);
            first.0 += c0;
            first.1 += i0;
            last.0 += c2 - c1;
            last.1 += i2 - i1;
        }
    }
    (first, last)
}

/// Whether the incorrect-to-correct admission ratio grew from the first third
/// to the final third. Cross-multiplied so zero or negative marginal counts
/// compare sensibly.
pub fn incorrect_ratio_increased(first: (i64, i64), last: (i64, i64)) -> bool {
    let (corr_first, incorr_first) = (first.0.max(0), first.1.max(0));
    let (corr_last, incorr_last) = (last.0.max(0), last.1.max(0));
    incorr_last * corr_first > incorr_first * corr_last
}

/// First-pass domain processing order of a run.
pub fn first_pass_order(manifest: &RunManifest) -> Vec<usize> {
    manifest
        .passes
        .first()
        .map(|p| p.visits.iter().map(|v| v.domain_id).collect())
        .unwrap_or_default()
}
