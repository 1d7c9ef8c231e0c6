//! The full training engine: source training, reiterative uncertainty-ordered
//! target adaptation, confidence-thresholded pseudo-source growth, and final
//! fine-tuning.
//!
//! The control loop is generic over a [`CurriculumModel`] so the schedule
//! logic can run against the real network or an instant stub (dry-run mode)
//! that exercises every scheduling and ledger invariant without touching
//! pixels.

use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::adversarial::LambdaSchedule;
use crate::data::{DatasetRegistry, EpochCursor, MinibatchSampler, SampleKey};
use crate::error::{Error, Result};
use crate::losses::{LossReport, MetricsLog, StepContext, StepSettings};
use crate::nnet::stream_rng;


// ---------------------------------------------------------------------------
// Hyper-parameters
// ---------------------------------------------------------------------------

/// Stopping rule for source training: stop once the windowed moving-average
/// loss has improved by less than `min_delta` for `patience` consecutive
/// checks, or at `max_iters`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceConvergence {
    pub patience: usize,
    pub min_delta: f64,
    pub max_iters: usize,
    /// Iterations between convergence checks (also the averaging window).
    pub check_every: usize,
}

impl Default for SourceConvergence {
    fn default() -> Self {
        Self {
            patience: 5,
            min_delta: 1e-3,
            max_iters: 2000,
            check_every: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Pseudo-source rows per minibatch (B_s).
    pub batch_source: usize,
    /// Target rows per minibatch (B_t).
    pub batch_target: usize,
    /// Confidence threshold for pseudo-sample acceptance.
    pub tau: f64,
    /// Total adaptation iterations per domain across all passes (K).
    pub adapt_iters: usize,
    /// Reiteration count (K*); each visit runs K / K* iterations.
    pub reiterations: usize,
    /// Fine-tuning iterations on the final ledger (K').
    pub finetune_iters: usize,
    pub lambda_edge: f64,
    pub lambda_node: f64,
    pub lambda_adv: LambdaSchedule,
    pub base_lr: f64,
    pub head_lr_multiplier: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub source_convergence: SourceConvergence,
    /// Reset optimizer state at every pass boundary instead of persisting it.
    pub reset_optimizer_each_pass: bool,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            batch_source: 48,
            batch_target: 16,
            tau: 0.7,
            adapt_iters: 1500,
            reiterations: 3,
            finetune_iters: 500,
            lambda_edge: 1.0,
            lambda_node: 0.3,
            lambda_adv: LambdaSchedule::Ramp { ceiling: 1.0 },
            base_lr: 1e-3,
            head_lr_multiplier: 10.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 7,
            source_convergence: SourceConvergence::default(),
            reset_optimizer_each_pass: false,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.batch_source < 1 || self.batch_target < 1 {
            return Err(Error::Config("B_s and B_t must be at least 1".into()));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Config(format!("tau must lie in (0,1), got {}", self.tau)));
        }
        if self.reiterations == 0 {
            return Err(Error::Config("K* must be at least 1".into()));
        }
        if self.adapt_iters % self.reiterations != 0 {
            return Err(Error::Config(format!(
                "K not divisible by K*: {} % {} != 0",
                self.adapt_iters, self.reiterations
            )));
        }
        if self.lambda_edge < 0.0 || self.lambda_node < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        match self.lambda_adv {
            LambdaSchedule::Fixed { value } if value < 0.0 => {
                return Err(Error::Config("lambda_adv must be nonnegative".into()))
            }
            LambdaSchedule::Ramp { ceiling } if ceiling < 0.0 => {
                return Err(Error::Config("lambda_adv ceiling must be nonnegative".into()))
            }
            _ => {}
        }
        Ok(())
    }

    /// Adaptation iterations per (domain, pass): K / K*.
    pub fn iters_per_visit(&self) -> usize {
        self.adapt_iters / self.reiterations
    }

    pub fn step_settings(&self) -> StepSettings {
        StepSettings {
            lambda_edge: self.lambda_edge,
            lambda_node: self.lambda_node,
            base_lr: self.base_lr,
            head_lr_multiplier: self.head_lr_multiplier,
        }
    }
}

// ---------------------------------------------------------------------------
// Pseudo-source ledger
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub key: SampleKey,
    pub label: usize,
    /// Graph-head confidence at acceptance; 1.0 for origin source samples.
    pub confidence: f64,
    /// Reiteration that accepted the sample; 0 for origin.
    pub pass_added: usize,
    /// Global iteration counter at acceptance; 0 for origin.
    pub accepted_at_iteration: usize,
}

/// The growing labeled pool: all source samples plus accepted target
/// pseudo-samples with provenance. Size never decreases; a sample identity is
/// admitted at most once for the whole run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PseudoSourceLedger {
    entries: Vec<LedgerEntry>,
    members: BTreeSet<SampleKey>,
    origin_count: usize,
}

impl PseudoSourceLedger {
    pub fn from_source(registry: &DatasetRegistry) -> Self {
        let mut entries = Vec::with_capacity(registry.source.len());
        let mut members = BTreeSet::new();
        for (i, s) in registry.source.iter().enumerate() {
            let key = SampleKey {
                domain_id: 0,
                index: i,
            };
            entries.push(LedgerEntry {
                key,
                label: s.label.expect("source labeled"),
                confidence: 1.0,
                pass_added: 0,
                accepted_at_iteration: 0,
            });
            members.insert(key);
        }
        Self {
            origin_count: entries.len(),
            entries,
            members,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn origin_count(&self) -> usize {
        self.origin_count
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &LedgerEntry {
        &self.entries[idx]
    }

    pub fn contains(&self, key: SampleKey) -> bool {
        self.members.contains(&key)
    }

    /// Admit a pseudo-sample if its confidence clears `tau` and the identity
    /// is new. Returns whether the entry was added.
    pub fn try_add(
        &mut self,
        key: SampleKey,
        label: usize,
        confidence: f64,
        tau: f64,
        pass: usize,
        iteration: usize,
    ) -> bool {
        if confidence <= tau || self.members.contains(&key) {
            return false;
        }
        self.members.insert(key);
        self.entries.push(LedgerEntry {
            key,
            label,
            confidence,
            pass_added: pass,
            accepted_at_iteration: iteration,
        });
        true
    }

    /// Structural audit: unique identities, thresholded confidences, origin
    /// prefix intact.
    pub fn check_invariants(&self, tau: f64) -> Result<()> {
        if self.members.len() != self.entries.len() {
            return Err(Error::Contract("ledger contains duplicate identities".into()));
        }
        for (i, e) in self.entries.iter().enumerate() {
            if i < self.origin_count {
                if e.key.domain_id != 0 {
                    return Err(Error::Contract("origin prefix corrupted".into()));
                }
            } else if e.confidence <= tau {
                return Err(Error::Contract(format!(
                    "non-origin entry {:?} has confidence {} <= tau {}",
                    e.key, e.confidence, tau
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Engine-facing model abstraction
// ---------------------------------------------------------------------------

/// Rows of one batch: `(identity, label)`; ledger rows carry their assigned
/// label, target rows are unlabeled. Ledger rows come first.
#[derive(Debug, Clone)]
pub struct BatchRows {
    pub rows: Vec<(SampleKey, Option<usize>)>,
    pub n_ledger: usize,
}

/// What the curriculum engine needs from a trainable model. Implemented by
/// the real network bundle and by an instant stub for dry-run scheduling.
pub trait CurriculumModel {
    /// Supervised classifier step on an all-labeled batch. Returns `l_ce`.
    fn supervised_step(&mut self, reg: &DatasetRegistry, rows: &BatchRows, ctx: StepContext)
        -> Result<f64>;

    /// One three-phase adaptation iteration.
    fn adapt_step(
        &mut self,
        reg: &DatasetRegistry,
        rows: &BatchRows,
        lambda_adv: f64,
        ctx: StepContext,
    ) -> Result<LossReport>;

    /// One combined fine-tuning step on an all-labeled ledger batch.
    fn finetune_step(&mut self, reg: &DatasetRegistry, rows: &BatchRows, ctx: StepContext)
        -> Result<LossReport>;

    /// Mean MLP-softmax Shannon entropy over the given samples (eval mode).
    fn mean_uncertainty(&mut self, reg: &DatasetRegistry, keys: &[SampleKey]) -> Result<f64>;

    /// Graph-head class/confidence for each target row, scored inside a batch
    /// with labeled ledger context (eval mode).
    fn graph_confidences(
        &mut self,
        reg: &DatasetRegistry,
        context: &[(SampleKey, usize)],
        targets: &[SampleKey],
    ) -> Result<Vec<(usize, f64)>>;

    /// MLP-head predictions (eval mode).
    fn predict(&mut self, reg: &DatasetRegistry, keys: &[SampleKey]) -> Result<Vec<usize>>;

    fn reset_optimizer(&mut self);

    /// Persist a checkpoint if this model has one (the stub does not).
    fn save_checkpoint(&mut self, path: &std::path::Path) -> Result<()>;

    fn fingerprint(&mut self) -> String;
}

// ---------------------------------------------------------------------------
// Manifest records
// ---------------------------------------------------------------------------

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SourceTrainingStats {
    pub iterations: usize,
    pub final_loss: f64,
    pub source_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AccuracySummary {
    /// `(domain_id, accuracy)` in domain order.
    pub per_domain: Vec<(usize, f64)>,
    pub average: f64,
}

/// Cumulative would-be pseudo-sample counts at a checkpoint inside one
/// adaptation visit (the confidence-quality instrument).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfidenceCheckpoint {
    pub at_iteration: usize,
    pub would_add: usize,
    pub would_correct: Option<usize>,
    pub would_incorrect: Option<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VisitRecord {
    /// Position within the pass (0-based q).
    pub order: usize,
    pub domain_id: usize,
    /// Uncertainty of the selected domain at selection time.
    pub uncertainty: f64,
    /// All candidate uncertainties at selection time, `(domain_id, H)`.
    pub uncertainties_remaining: Vec<(usize, f64)>,
    pub iterations: usize,
    pub added: usize,
    pub added_correct: Option<usize>,
    pub added_incorrect: Option<usize>,
    pub confidence_checkpoints: Vec<ConfidenceCheckpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PassRecord {
    /// 1-based reiteration index k*.
    pub pass: usize,
    pub visits: Vec<VisitRecord>,
    pub average_target_accuracy: Option<f64>,
    pub ledger_size_after: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub origin_count: usize,
    pub total_entries: usize,
    /// `(domain_id, pseudo-samples admitted)` for target domains.
    pub per_domain: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScheduleSummary {
    /// Domains in processing order across all passes.
    pub domain_sequence: Vec<usize>,
    pub total_adaptation_iterations: usize,
}

/// Everything a completed (or dry) run reports. Deliberately free of
/// timestamps and absolute paths so identical (config, seed) runs serialize
/// byte-identically.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub mode: String,
    pub hyperparams: HyperParams,
    pub n_classes: usize,
    pub n_domains: usize,
    pub source_training: SourceTrainingStats,
    pub baseline: Option<AccuracySummary>,
    pub passes: Vec<PassRecord>,
    pub finetune_iterations: usize,
    pub final_eval: Option<AccuracySummary>,
    pub ledger: LedgerSummary,
    pub schedule: ScheduleSummary,
    pub model_fingerprint: String,
}

/// Output sinks for a run; everything is optional.
#[derive(Default)]
pub struct RunSinks<'a> {
    pub metrics: Option<&'a mut MetricsLog>,
    pub checkpoint_dir: Option<PathBuf>,
}

pub struct RunOutcome {
    pub manifest: RunManifest,
    pub ledger: PseudoSourceLedger,
}

// ---------------------------------------------------------------------------
// Engine operations
// ---------------------------------------------------------------------------

fn all_domain_keys(reg: &DatasetRegistry, domain_id: usize) -> Vec<SampleKey> {
    (0..reg.target(domain_id).len())
        .map(|index| SampleKey { domain_id, index })
        .collect()
}

/// Accuracy of `model` on one target domain against hidden truth.
fn domain_accuracy<M: CurriculumModel>(
    model: &mut M,
    reg: &DatasetRegistry,
    domain_id: usize,
) -> Result<Option<f64>> {
    if !reg.has_hidden_truth() {
        return Ok(None);
    }
    let keys = all_domain_keys(reg, domain_id);
    let preds = model.predict(reg, &keys)?;
    let correct = keys
        .iter()
        .zip(&preds)
        .filter(|(k, &p)| reg.hidden_truth(**k) == Some(p))
        .count();
    Ok(Some(correct as f64 / keys.len() as f64))
}

fn target_accuracy_summary<M: CurriculumModel>(
    model: &mut M,
    reg: &DatasetRegistry,
) -> Result<Option<AccuracySummary>> {
    if !reg.has_hidden_truth() {
        return Ok(None);
    }
    let mut per_domain = Vec::new();
    let mut total = 0.0;
    for d in 1..=reg.n_targets() {
        let acc = domain_accuracy(model, reg, d)?.expect("truth present");
        per_domain.push((d, acc));
        total += acc;
    }
    Ok(Some(AccuracySummary {
        average: total / per_domain.len() as f64,
        per_domain,
    }))
}

/// Step 1: train the extractor and MLP head on the labeled source until the
/// loss converges per `hp.source_convergence`.
pub fn train_source<M: CurriculumModel>(
    model: &mut M,
    reg: &DatasetRegistry,
    hp: &HyperParams,
    mut metrics: Option<&mut MetricsLog>,
) -> Result<SourceTrainingStats> {
    let conv = hp.source_convergence;
    let mut cursor = EpochCursor::new(reg.source.len(), stream_rng(hp.seed, "source-train"));
    let mut window: Vec<f64> = Vec::with_capacity(conv.check_every.max(1));
    let mut best_avg = f64::INFINITY;
    let mut stale_checks = 0usize;
    let mut last_loss = f64::NAN;
    let mut iterations = 0usize;
    while iterations < conv.max_iters {
        let rows: Vec<(SampleKey, Option<usize>)> = cursor
            .take(hp.batch_source)
            .into_iter()
            .map(|index| {
                let key = SampleKey {
                    domain_id: 0,
                    index,
                };
                (key, reg.source[index].label)
            })
            .collect();
        let batch = BatchRows {
            n_ledger: rows.len(),
            rows,
        };
        let ctx = StepContext {
            iteration: iterations,
            pass: 0,
            domain: -1,
        };
        let loss = model.supervised_step(reg, &batch, ctx)?;
        last_loss = loss;
        iterations += 1;
        if let Some(m) = metrics.as_deref_mut() {
            m.log(
                iterations,
                0,
                -1,
                &LossReport {
                    l_ce_mlp: loss,
                    l_bce_edge: 0.0,
                    l_ce_node: 0.0,
                    l_adv: 0.0,
                    lambda_adv: 0.0,
                },
            );
        }
        window.push(loss);
        if window.len() == conv.check_every.max(1) {
            let avg = window.iter().sum::<f64>() / window.len() as f64;
            window.clear();
            if best_avg - avg < conv.min_delta {
                stale_checks += 1;
                if stale_checks >= conv.patience {
                    break;
                }
            } else {
                stale_checks = 0;
            }
            best_avg = best_avg.min(avg);
        }
    }
    // source accuracy, evaluated on the training source set
    let keys: Vec<SampleKey> = (0..reg.source.len())
        .map(|index| SampleKey {
            domain_id: 0,
            index,
        })
        .collect();
    let preds = model.predict(reg, &keys)?;
    let correct = keys
        .iter()
        .zip(&preds)
        .filter(|(k, &p)| reg.source[k.index].label == Some(p))
        .count();
    Ok(SourceTrainingStats {
        iterations,
        final_loss: last_loss,
        source_accuracy: correct as f64 / keys.len().max(1) as f64,
    })
}

/// Mean prediction uncertainty of one target domain.
pub fn domain_uncertainty<M: CurriculumModel>(
    model: &mut M,
    reg: &DatasetRegistry,
    domain_id: usize,
) -> Result<f64> {
    let keys = all_domain_keys(reg, domain_id);
    if keys.is_empty() {
        return Err(Error::Contract(format!("target domain {domain_id} is empty")));
    }
    model.mean_uncertainty(reg, &keys)
}

/// Stage 1: pick the lowest-uncertainty domain among `remaining`; ties break
/// toward the lowest domain id. Returns the winner plus all candidate scores.
pub fn select_domain<M: CurriculumModel>(
    model: &mut M,
    reg: &DatasetRegistry,
    remaining: &BTreeSet<usize>,
) -> Result<(usize, Vec<(usize, f64)>)> {
    if remaining.is_empty() {
        return Err(Error::Contract("no domains remaining to select".into()));
    }
    let mut scores = Vec::with_capacity(remaining.len());
    for &d in remaining {
        scores.push((d, domain_uncertainty(model, reg, d)?));
    }
    // BTreeSet iteration is ascending, so strict `<` keeps the lowest id on ties
    let mut best = scores[0];
    for &(d, h) in &scores[1..] {
        if h < best.1 {
            best = (d, h);
        }
    }
    Ok((best.0, scores))
}

/// Score every not-yet-admitted sample of a domain with the graph head inside
/// ledger-context batches. Deterministic for a fixed (pass, domain) tag; each
/// sample is scored at its first appearance.
fn score_domain_candidates<M: CurriculumModel>(
    model: &mut M,
    reg: &DatasetRegistry,
    ledger: &PseudoSourceLedger,
    domain_id: usize,
    hp: &HyperParams,
    tag: &str,
) -> Result<Vec<(SampleKey, usize, f64)>> {
    let candidates: Vec<SampleKey> = all_domain_keys(reg, domain_id)
        .into_iter()
        .filter(|k| !ledger.contains(*k))
        .collect();
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let mut context_cursor = EpochCursor::new(ledger.len(), stream_rng(hp.seed, tag));
    let mut scored: Vec<Option<(usize, f64)>> = vec![None; candidates.len()];
    let chunk = hp.batch_target.max(1);
    let mut start = 0usize;
    while start < candidates.len() {
        // wrap the tail so the graph always sees a full-size batch
        let rows: Vec<SampleKey> = (0..chunk)
            .map(|i| candidates[(start + i) % candidates.len()])
            .collect();
        let context: Vec<(SampleKey, usize)> = context_cursor
            .take(hp.batch_source)
            .into_iter()
            .map(|idx| {
                let e = ledger.entry(idx);
                (e.key, e.label)
            })
            .collect();
        let results = model.graph_confidences(reg, &context, &rows)?;
        for (i, (class, w)) in results.into_iter().enumerate() {
            let pos = start + i;
            if pos < candidates.len() && scored[pos].is_none() {
                scored[pos] = Some((class, w));
            }
        }
        start += chunk;
    }
    Ok(candidates
        .into_iter()
        .zip(scored)
        .map(|(k, s)| {
            let (class, w) = s.expect("every candidate scored");
            (k, class, w)
        })
        .collect())
}

fn audit_against_truth(
    reg: &DatasetRegistry,
    picks: &[(SampleKey, usize, f64)],
) -> (Option<usize>, Option<usize>) {
    if !reg.has_hidden_truth() {
        return (None, None);
    }
    let mut correct = 0usize;
    let mut incorrect = 0usize;
    for (key, label, _) in picks {
        if reg.hidden_truth(*key) == Some(*label) {
            correct += 1;
        } else {
            incorrect += 1;
        }
    }
    (Some(correct), Some(incorrect))
}

/// Stage 2: `iters` three-phase iterations on one domain. Confidence
/// checkpoints are probed at one third, two thirds and the end of the visit
/// (cumulative would-be admissions; no ledger mutation).
#[allow(clippy::too_many_arguments)]
pub fn adapt_domain<M: CurriculumModel>(
    model: &mut M,
    reg: &DatasetRegistry,
    ledger: &PseudoSourceLedger,
    domain_id: usize,
    iters: usize,
    pass: usize,
    hp: &HyperParams,
    mut metrics: Option<&mut MetricsLog>,
    iter_offset: usize,
) -> Result<Vec<ConfidenceCheckpoint>> {
    let mut checkpoints = Vec::new();
    if iters == 0 {
        return Ok(checkpoints);
    }
    let tag = format!("adapt-p{pass}-d{domain_id}");
    let mut sampler = MinibatchSampler::new(
        ledger.len(),
        reg.target(domain_id).len(),
        domain_id,
        hp.batch_source,
        hp.batch_target,
        hp.seed,
        &tag,
    )?;
    let probe_at: Vec<usize> = [iters.div_ceil(3), (2 * iters).div_ceil(3), iters]
        .into_iter()
        .collect();
    let pseudo_tag = format!("pseudo-p{pass}-d{domain_id}");
    // lambda progress is cumulative over the domain's whole K-iteration
    // budget, so the schedule does not depend on how K is split across passes
    let visits_done = pass.saturating_sub(1) as f64;
    let total_visits = hp.reiterations as f64;
    for it in 0..iters {
        let progress = (visits_done + it as f64 / iters as f64) / total_visits;
        let lambda = hp.lambda_adv.value_at(progress);
        let mb = sampler.next();
        let mut rows: Vec<(SampleKey, Option<usize>)> = mb
            .ledger_rows
            .iter()
            .map(|&idx| {
                let e = ledger.entry(idx);
                (e.key, Some(e.label))
            })
            .collect();
        rows.extend(mb.target_rows.iter().map(|&index| {
            (
                SampleKey {
                    domain_id,
                    index,
                },
                None,
            )
        }));
        let batch = BatchRows {
            n_ledger: mb.ledger_rows.len(),
            rows,
        };
        let ctx = StepContext {
            iteration: iter_offset + it + 1,
            pass,
            domain: domain_id as i64,
        };
        let report = model.adapt_step(reg, &batch, lambda, ctx)?;
        if let Some(m) = metrics.as_deref_mut() {
            m.log(iter_offset + it + 1, pass, domain_id as i64, &report);
        }
        if probe_at.contains(&(it + 1)) {
            let scored =
                score_domain_candidates(model, reg, ledger, domain_id, hp, &pseudo_tag)?;
            let picks: Vec<(SampleKey, usize, f64)> = scored
                .into_iter()
                .filter(|(_, _, w)| *w > hp.tau)
                .collect();
            let (would_correct, would_incorrect) = audit_against_truth(reg, &picks);
            checkpoints.push(ConfidenceCheckpoint {
                at_iteration: it + 1,
                would_add: picks.len(),
                would_correct,
                would_incorrect,
            });
        }
    }
    Ok(checkpoints)
}

/// Outcome of one pseudo-labeling stage.
#[derive(Debug, Clone, Copy)]
pub struct AdditionOutcome {
    pub added: usize,
    pub correct: Option<usize>,
    pub incorrect: Option<usize>,
}

/// Stage 3: admit every not-yet-ledgered sample of the domain whose graph-head
/// confidence exceeds tau. Returns the admission count (zero is valid).
pub fn pseudo_label_domain<M: CurriculumModel>(
    model: &mut M,
    reg: &DatasetRegistry,
    ledger: &mut PseudoSourceLedger,
    domain_id: usize,
    pass: usize,
    hp: &HyperParams,
    global_iteration: usize,
) -> Result<AdditionOutcome> {
    let tag = format!("pseudo-p{pass}-d{domain_id}");
    let scored = score_domain_candidates(model, reg, ledger, domain_id, hp, &tag)?;
    let picks: Vec<(SampleKey, usize, f64)> = scored
        .into_iter()
        .filter(|(_, _, w)| *w > hp.tau)
        .collect();
    let (correct, incorrect) = audit_against_truth(reg, &picks);
    let mut added = 0usize;
    for (key, label, w) in picks {
        if ledger.try_add(key, label, w, hp.tau, pass, global_iteration) {
            added += 1;
        }
    }
    Ok(AdditionOutcome {
        added,
        correct,
        incorrect,
    })
}

/// Step 3: fine-tune on ledger-only batches for `iters` iterations.
pub fn finetune<M: CurriculumModel>(
    model: &mut M,
    reg: &DatasetRegistry,
    ledger: &PseudoSourceLedger,
    iters: usize,
    hp: &HyperParams,
    mut metrics: Option<&mut MetricsLog>,
    iter_offset: usize,
) -> Result<usize> {
    if iters == 0 {
        return Ok(0);
    }
    let pass_label = hp.reiterations + 1;
    let batch_size = hp.batch_source + hp.batch_target;
    let mut cursor = EpochCursor::new(ledger.len(), stream_rng(hp.seed, "finetune"));
    for it in 0..iters {
        let rows: Vec<(SampleKey, Option<usize>)> = cursor
            .take(batch_size)
            .into_iter()
            .map(|idx| {
                let e = ledger.entry(idx);
                (e.key, Some(e.label))
            })
            .collect();
        let batch = BatchRows {
            n_ledger: rows.len(),
            rows,
        };
        let ctx = StepContext {
            iteration: iter_offset + it + 1,
            pass: pass_label,
            domain: -1,
        };
        let report = model.finetune_step(reg, &batch, ctx)?;
        if let Some(m) = metrics.as_deref_mut() {
            m.log(iter_offset + it + 1, pass_label, -1, &report);
        }
    }
    Ok(iters)
}

/// The whole training procedure: source training, K* reiterations of
/// (select -> adapt -> pseudo-label) over all domains, fine-tuning, manifest.
pub fn run<M: CurriculumModel>(
    model: &mut M,
    reg: &DatasetRegistry,
    hp: &HyperParams,
    mode: &str,
    sinks: RunSinks<'_>,
) -> Result<RunOutcome> {
    let snapshot_dir = sinks.checkpoint_dir.clone();
    let result = run_inner(model, reg, hp, mode, sinks);
    if let Err(err) = &result {
        // leave a post-mortem snapshot next to the other artifacts
        if matches!(err, Error::Numeric { .. }) {
            if let Some(dir) = snapshot_dir {
                let _ = model.save_checkpoint(&dir.join("checkpoint_abort.json"));
            }
        }
    }
    result
}

fn run_inner<M: CurriculumModel>(
    model: &mut M,
    reg: &DatasetRegistry,
    hp: &HyperParams,
    mode: &str,
    mut sinks: RunSinks<'_>,
) -> Result<RunOutcome> {
    hp.validate()?;
    let n = reg.n_targets();
    let mut ledger = PseudoSourceLedger::from_source(reg);

    let source_training = train_source(model, reg, hp, sinks.metrics.as_deref_mut())?;
    let baseline = target_accuracy_summary(model, reg)?;

    let mut passes = Vec::with_capacity(hp.reiterations);
    let mut domain_sequence = Vec::with_capacity(hp.reiterations * n);
    let mut global_iter = source_training.iterations;
    let iters_per_visit = hp.iters_per_visit();

    for pass in 1..=hp.reiterations {
        if hp.reset_optimizer_each_pass {
            model.reset_optimizer();
        }
        let mut remaining: BTreeSet<usize> = (1..=n).collect();
        let mut visits = Vec::with_capacity(n);
        for q in 0..n {
            let (selected, scores) = select_domain(model, reg, &remaining)?;
            let uncertainty = scores
                .iter()
                .find(|(d, _)| *d == selected)
                .map(|(_, h)| *h)
                .expect("selected domain scored");
            let checkpoints = adapt_domain(
                model,
                reg,
                &ledger,
                selected,
                iters_per_visit,
                pass,
                hp,
                sinks.metrics.as_deref_mut(),
                global_iter,
            )?;
            global_iter += iters_per_visit;
            let outcome =
                pseudo_label_domain(model, reg, &mut ledger, selected, pass, hp, global_iter)?;
            ledger.check_invariants(hp.tau)?;
            remaining.remove(&selected);
            domain_sequence.push(selected);
            visits.push(VisitRecord {
                order: q,
                domain_id: selected,
                uncertainty,
                uncertainties_remaining: scores,
                iterations: iters_per_visit,
                added: outcome.added,
                added_correct: outcome.correct,
                added_incorrect: outcome.incorrect,
                confidence_checkpoints: checkpoints,
            });
        }
        let pass_accuracy = target_accuracy_summary(model, reg)?;
        if let Some(dir) = &sinks.checkpoint_dir {
            model.save_checkpoint(&dir.join(format!("checkpoint_pass_{pass:02}.json")))?;
        }
        passes.push(PassRecord {
            pass,
            visits,
            average_target_accuracy: pass_accuracy.map(|a| a.average),
            ledger_size_after: ledger.len(),
        });
    }

    let finetune_iterations = finetune(
        model,
        reg,
        &ledger,
        hp.finetune_iters,
        hp,
        sinks.metrics.as_deref_mut(),
        global_iter,
    )?;
    let final_eval = target_accuracy_summary(model, reg)?;
    if let Some(dir) = &sinks.checkpoint_dir {
        model.save_checkpoint(&dir.join("checkpoint_final.json"))?;
    }

    let per_domain: Vec<(usize, usize)> = (1..=n)
        .map(|d| {
            (
                d,
                ledger
                    .entries()
                    .iter()
                    .filter(|e| e.key.domain_id == d)
                    .count(),
            )
        })
        .collect();

    let manifest = RunManifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        mode: mode.to_string(),
        hyperparams: hp.clone(),
        n_classes: reg.n_c,
        n_domains: n,
        source_training,
        baseline,
        passes,
        finetune_iterations,
        final_eval,
        ledger: LedgerSummary {
            origin_count: ledger.origin_count(),
            total_entries: ledger.len(),
            per_domain,
        },
        schedule: ScheduleSummary {
            domain_sequence,
            total_adaptation_iterations: hp.reiterations * n * iters_per_visit,
        },
        model_fingerprint: model.fingerprint(),
    };
    Ok(RunOutcome { manifest, ledger })
}
