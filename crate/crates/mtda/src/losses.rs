//! The four training losses and the three-phase parameter update wired the
//! way the adaptation loop uses them.
//!
//! Per adaptation iteration:
//!   1. discriminator step on `lambda_adv * l_adv` (psi only),
//!   2. extractor + MLP step on `l_ce_mlp - lambda_adv * l_adv`, realized via
//!      gradient reversal (theta, phi),
//!   3. extractor + graph-head step on
//!      `lambda_edge * l_bce_edge + lambda_node * l_ce_node` (theta, phi').
//!
//! Supervised cross-entropy (MLP and node) is computed over ledger rows only;
//! target rows enter the graph through aggregation and the edge loss with MLP
//! pseudo-labels.

use std::fs::{File, OpenOptions};
use std::io::Write as _;
use std::path::Path;

use ndarray::{Array2, Array4};

use crate::adversarial::{adversarial_loss, adversarial_loss_grad, Grl};
use crate::backbone::{BackboneCache, FeatureMatrix};
use crate::error::{Error, Result};
use crate::heads::{build_edge_targets, AffinityMatrix, EdgeTargets, LogitMatrix};
use crate::model::ModelBundle;
use crate::nnet::{argmax_rows, c, softmax_rows, to_f64, GradMap, Mode, Real, Sgd};

/// Probability clamp used inside every log term.
pub const PROB_EPS: f64 = 1e-7;

/// Scalar losses of one iteration.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossReport {
    pub l_ce_mlp: f64,
    pub l_bce_edge: f64,
    pub l_ce_node: f64,
    pub l_adv: f64,
    pub lambda_adv: f64,
}

impl LossReport {
    pub fn weighted_gnn(&self, lambda_edge: f64, lambda_node: f64) -> f64 {
        lambda_edge * self.l_bce_edge + lambda_node * self.l_ce_node
    }

    pub fn all_finite(&self) -> bool {
        self.l_ce_mlp.is_finite()
            && self.l_bce_edge.is_finite()
            && self.l_ce_node.is_finite()
            && self.l_adv.is_finite()
    }
}

/// Optimizer settings shared by every phase.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct StepSettings {
    pub lambda_edge: f64,
    pub lambda_node: f64,
    pub base_lr: f64,
    /// Heads and discriminator train at `base_lr * head_lr_multiplier`.
    pub head_lr_multiplier: f64,
}

fn lr_for(settings: &StepSettings) -> impl Fn(&str) -> f64 + '_ {
    move |name: &str| {
        if name.starts_with("backbone.") {
            settings.base_lr
        } else {
            settings.base_lr * settings.head_lr_multiplier
        }
    }
}

/// Where an error happened, for numeric-abort diagnostics.
#[derive(Debug, Clone, Copy, Default)]
pub struct StepContext {
    pub iteration: usize,
    pub pass: usize,
    pub domain: i64,
}

fn numeric_guard(value: f64, what: &str, ctx: StepContext) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Numeric {
            iteration: ctx.iteration,
            pass: ctx.pass,
            domain: ctx.domain,
            detail: format!("{what} is {value}"),
        })
    }
}

// ---------------------------------------------------------------------------
// Loss values and their input gradients
// ---------------------------------------------------------------------------

/// Mean cross-entropy over the rows selected by `mask`. Used for both the MLP
/// head and the node classifier (same functional, different logits).
pub fn masked_cross_entropy<F: Real>(
    logits: &LogitMatrix<F>,
    classes: &[Option<usize>],
    mask: &[bool],
) -> Result<f64> {
    let n = mask.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Contract("cross-entropy over an empty mask".into()));
    }
    let probs = softmax_rows(logits);
    let mut total = 0.0;
    for (i, (&m, class)) in mask.iter().zip(classes).enumerate() {
        if !m {
            continue;
        }
        let class = class.ok_or_else(|| {
            Error::Contract(format!("masked row {i} has no label for cross-entropy"))
        })?;
        let p = to_f64(probs[[i, class]]);
        total -= p.max(PROB_EPS).ln();
    }
    Ok(total / n as f64)
}

/// Gradient of `masked_cross_entropy` wrt the logits: `(softmax - onehot)/n`
/// on masked rows, zero elsewhere.
pub fn masked_cross_entropy_grad<F: Real>(
    logits: &LogitMatrix<F>,
    classes: &[Option<usize>],
    mask: &[bool],
) -> Array2<F> {
    let n = mask.iter().filter(|&&m| m).count();
    let scale = c::<F>(1.0 / n.max(1) as f64);
    let mut g = softmax_rows(logits);
    for (i, (&m, class)) in mask.iter().zip(classes).enumerate() {
        if !m {
            g.row_mut(i).fill(F::zero());
            continue;
        }
        let class = class.expect("masked rows are labeled");
        g[[i, class]] = g[[i, class]] - F::one();
        g.row_mut(i).mapv_inplace(|v| v * scale);
    }
    g
}

/// Mean binary cross-entropy between affinities and edge targets over the
/// off-diagonal masked pairs. Self-pairs are excluded: they are trivially
/// positive and would bias the loss.
pub fn bce_edge<F: Real>(aff: &AffinityMatrix<F>, targets: &EdgeTargets<F>) -> Result<f64> {
    let b = aff.nrows();
    if targets.values.dim() != (b, b) || targets.mask.dim() != (b, b) {
        return Err(Error::Contract(format!(
            "edge targets must be {b}x{b}, got {:?}",
            targets.values.dim()
        )));
    }
    let mut total = 0.0;
    let mut n = 0usize;
    for i in 0..b {
        for j in 0..b {
            if i == j || !targets.mask[[i, j]] {
                continue;
            }
            let p = to_f64(aff[[i, j]]);
            let t = to_f64(targets.values[[i, j]]);
            total -= t * p.max(PROB_EPS).ln() + (1.0 - t) * (1.0 - p).max(PROB_EPS).ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Contract("edge loss over an empty pair mask".into()));
    }
    Ok(total / n as f64)
}

/// Gradient of `bce_edge` wrt the pre-sigmoid pair scores:
/// `(affinity - target)/n_pairs` on counted pairs, zero elsewhere.
pub fn bce_edge_grad_scores<F: Real>(
    aff: &AffinityMatrix<F>,
    targets: &EdgeTargets<F>,
) -> Array2<F> {
    let b = aff.nrows();
    let mut n = 0usize;
    for i in 0..b {
        for j in 0..b {
            if i != j && targets.mask[[i, j]] {
                n += 1;
            }
        }
    }
    let scale = c::<F>(1.0 / n.max(1) as f64);
    let mut g = Array2::<F>::zeros((b, b));
    for i in 0..b {
        for j in 0..b {
            if i == j || !targets.mask[[i, j]] {
                continue;
            }
            g[[i, j]] = (aff[[i, j]] - targets.values[[i, j]]) * scale;
        }
    }
    g
}

// ---------------------------------------------------------------------------
// Phase updates
// ---------------------------------------------------------------------------

/// One already-materialized training batch.
pub struct BatchTensors<F: Real> {
    /// `[B_s + B_t, C, H, W]`, ledger rows first.
    pub images: Array4<F>,
    /// Ledger rows carry their assigned label; target rows are `None`.
    pub classes: Vec<Option<usize>>,
    /// True for the first `B_s` rows.
    pub ledger_mask: Vec<bool>,
    /// 0 for ledger rows, 1 for target rows.
    pub domain_flags: Vec<u8>,
}

/// Phase 1: discriminator step on `lambda_adv * l_adv`. Touches psi only;
/// features are treated as constants. Returns the (unscaled) adversarial loss.
pub fn phase_discriminator<F: Real>(
    model: &mut ModelBundle<F>,
    opt: &mut Sgd<F>,
    feats: &FeatureMatrix<F>,
    domain_flags: &[u8],
    lambda_adv: f64,
    settings: &StepSettings,
    ctx: StepContext,
) -> Result<f64> {
    let cache = model.disc.forward(feats);
    let l_adv = numeric_guard(
        adversarial_loss(&cache.scores, domain_flags)?,
        "l_adv",
        ctx,
    )?;
    if lambda_adv > 0.0 {
        let glogits = adversarial_loss_grad(&cache.scores, domain_flags)
            .mapv(|g| g * c::<F>(lambda_adv));
        let mut grads = GradMap::new();
        model.disc.backward(&cache, &glogits, &mut grads);
        opt.step(model.param_entries_for(&["disc."]), &grads, lr_for(settings));
    }
    Ok(l_adv)
}

/// Phase 2: extractor + MLP step on `l_ce_mlp - lambda_adv * l_adv`, realized
/// with a gradient reversal layer between the extractor and the discriminator.
/// Touches theta and phi; the discriminator only supplies gradients.
pub fn phase_classifier_adversarial<F: Real>(
    model: &mut ModelBundle<F>,
    opt: &mut Sgd<F>,
    feats: &FeatureMatrix<F>,
    cache: &BackboneCache<F>,
    batch: &BatchTensors<F>,
    lambda_adv: f64,
    settings: &StepSettings,
    ctx: StepContext,
) -> Result<f64> {
    let logits = model.mlp.forward(feats);
    let l_ce = numeric_guard(
        masked_cross_entropy(&logits, &batch.classes, &batch.ledger_mask)?,
        "l_ce_mlp",
        ctx,
    )?;
    let glogits = masked_cross_entropy_grad(&logits, &batch.classes, &batch.ledger_mask);
    let mut grads = GradMap::new();
    let mut gfeats = model.mlp.backward(feats, &glogits, &mut grads);
    if lambda_adv > 0.0 {
        let grl = Grl::new(lambda_adv);
        let reversed_in = grl.forward(feats);
        let dcache = model.disc.forward(&reversed_in);
        let glog_adv = adversarial_loss_grad(&dcache.scores, &batch.domain_flags);
        let mut scratch = GradMap::new(); // discriminator grads are discarded here
        let gfeats_adv = model.disc.backward(&dcache, &glog_adv, &mut scratch);
        gfeats += &grl.backward(&gfeats_adv);
    }
    model.backbone.backward(cache, &gfeats, &mut grads);
    opt.step(
        model.param_entries_for(&["backbone.", "mlp."]),
        &grads,
        lr_for(settings),
    );
    Ok(l_ce)
}

/// Phase 3: extractor + graph-head step on
/// `lambda_edge * l_bce_edge + lambda_node * l_ce_node`. Runs its own forward
/// because theta changed in phase 2. Edge supervision pairs true ledger labels
/// with MLP pseudo-labels on target rows. Touches theta and phi'.
pub fn phase_graph<F: Real>(
    model: &mut ModelBundle<F>,
    opt: &mut Sgd<F>,
    batch: &BatchTensors<F>,
    settings: &StepSettings,
    ctx: StepContext,
) -> Result<(f64, f64)> {
    let (feats, cache) = model.backbone.forward(&batch.images, Mode::Train)?;
    // MLP pseudo-labels for unlabeled rows (teacher signal, no gradient)
    let mlp_logits = model.mlp.forward(&feats);
    let pseudo = argmax_rows(&mlp_logits);
    let combined: Vec<Option<usize>> = batch
        .classes
        .iter()
        .enumerate()
        .map(|(i, c)| c.or(Some(pseudo[i])))
        .collect();
    let targets = build_edge_targets::<F>(&combined)?;

    let ecache = model.edge.forward(&feats)?;
    let l_edge = numeric_guard(bce_edge(&ecache.affinity, &targets)?, "l_bce_edge", ctx)?;
    let (node_logits, ncache) = model.node.forward(&feats, &ecache.affinity)?;
    let l_node = numeric_guard(
        masked_cross_entropy(&node_logits, &batch.classes, &batch.ledger_mask)?,
        "l_ce_node",
        ctx,
    )?;

    if settings.lambda_edge == 0.0 && settings.lambda_node == 0.0 {
        return Ok((l_edge, l_node));
    }

    let mut grads = GradMap::new();
    let gnode_logits = masked_cross_entropy_grad(&node_logits, &batch.classes, &batch.ledger_mask)
        .mapv(|g| g * c::<F>(settings.lambda_node));
    let (gfeats_node, gaff_node) = model.node.backward(&feats, &ncache, &gnode_logits, &mut grads);
    // combine both loss paths at the pre-sigmoid pair scores
    let mut gscores =
        bce_edge_grad_scores(&ecache.affinity, &targets).mapv(|g| g * c::<F>(settings.lambda_edge));
    ndarray::Zip::from(&mut gscores)
        .and(&gaff_node)
        .and(&ecache.affinity)
        .for_each(|gs, &ga, &a| {
            *gs = *gs + ga * a * (F::one() - a);
        });
    let gfeats_edge = model.edge.backward(&ecache, &gscores, &mut grads);
    let gfeats = &gfeats_node + &gfeats_edge;
    model.backbone.backward(&cache, &gfeats, &mut grads);
    opt.step(
        model.param_entries_for(&["backbone.", "edge.", "node."]),
        &grads,
        lr_for(settings),
    );
    Ok((l_edge, l_node))
}

/// One full adaptation iteration: the three phases in order on one minibatch.
pub fn combine_and_step<F: Real>(
    model: &mut ModelBundle<F>,
    opt: &mut Sgd<F>,
    batch: &BatchTensors<F>,
    lambda_adv: f64,
    settings: &StepSettings,
    ctx: StepContext,
) -> Result<LossReport> {
    let (feats, cache) = model.backbone.forward(&batch.images, Mode::Train)?;
    let l_adv = phase_discriminator(
        model,
        opt,
        &feats,
        &batch.domain_flags,
        lambda_adv,
        settings,
        ctx,
    )?;
    let l_ce_mlp =
        phase_classifier_adversarial(model, opt, &feats, &cache, batch, lambda_adv, settings, ctx)?;
    let (l_bce_edge, l_ce_node) = phase_graph(model, opt, batch, settings, ctx)?;
    Ok(LossReport {
        l_ce_mlp,
        l_bce_edge,
        l_ce_node,
        l_adv,
        lambda_adv,
    })
}

/// Supervised step for source training: `l_ce_mlp` on an all-labeled batch,
/// updating theta and phi.
pub fn supervised_step<F: Real>(
    model: &mut ModelBundle<F>,
    opt: &mut Sgd<F>,
    images: &Array4<F>,
    classes: &[Option<usize>],
    settings: &StepSettings,
    ctx: StepContext,
) -> Result<f64> {
    let mask = vec![true; classes.len()];
    let (feats, cache) = model.backbone.forward(images, Mode::Train)?;
    let logits = model.mlp.forward(&feats);
    let l_ce = numeric_guard(
        masked_cross_entropy(&logits, classes, &mask)?,
        "l_ce_mlp",
        ctx,
    )?;
    let glogits = masked_cross_entropy_grad(&logits, classes, &mask);
    let mut grads = GradMap::new();
    let gfeats = model.mlp.backward(&feats, &glogits, &mut grads);
    model.backbone.backward(&cache, &gfeats, &mut grads);
    opt.step(
        model.param_entries_for(&["backbone.", "mlp."]),
        &grads,
        lr_for(settings),
    );
    Ok(l_ce)
}

/// Fine-tuning step on ledger-only batches: minimizes
/// `l_ce_mlp + lambda_edge * l_bce_edge + lambda_node * l_ce_node` with the
/// assigned labels as ground truth, updating theta, phi and phi' in one step.
/// No adversarial phase.
pub fn finetune_step<F: Real>(
    model: &mut ModelBundle<F>,
    opt: &mut Sgd<F>,
    images: &Array4<F>,
    classes: &[Option<usize>],
    settings: &StepSettings,
    ctx: StepContext,
) -> Result<LossReport> {
    let mask = vec![true; classes.len()];
    let (feats, cache) = model.backbone.forward(images, Mode::Train)?;
    let mut grads = GradMap::new();

    let logits = model.mlp.forward(&feats);
    let l_ce_mlp = numeric_guard(
        masked_cross_entropy(&logits, classes, &mask)?,
        "l_ce_mlp",
        ctx,
    )?;
    let glogits = masked_cross_entropy_grad(&logits, classes, &mask);
    let mut gfeats = model.mlp.backward(&feats, &glogits, &mut grads);

    let targets = build_edge_targets::<F>(classes)?;
    let ecache = model.edge.forward(&feats)?;
    let l_bce_edge = numeric_guard(bce_edge(&ecache.affinity, &targets)?, "l_bce_edge", ctx)?;
    let (node_logits, ncache) = model.node.forward(&feats, &ecache.affinity)?;
    let l_ce_node = numeric_guard(
        masked_cross_entropy(&node_logits, classes, &mask)?,
        "l_ce_node",
        ctx,
    )?;
    let gnode_logits = masked_cross_entropy_grad(&node_logits, classes, &mask)
        .mapv(|g| g * c::<F>(settings.lambda_node));
    let (gfeats_node, gaff_node) = model.node.backward(&feats, &ncache, &gnode_logits, &mut grads);
    let mut gscores =
        bce_edge_grad_scores(&ecache.affinity, &targets).mapv(|g| g * c::<F>(settings.lambda_edge));
    ndarray::Zip::from(&mut gscores)
        .and(&gaff_node)
        .and(&ecache.affinity)
        .for_each(|gs, &ga, &a| {
            *gs = *gs + ga * a * (F::one() - a);
        });
    let gfeats_edge = model.edge.backward(&ecache, &gscores, &mut grads);
    gfeats += &gfeats_node;
    gfeats += &gfeats_edge;
    model.backbone.backward(&cache, &gfeats, &mut grads);
    opt.step(
        model.param_entries_for(&["backbone.", "mlp.", "edge.", "node."]),
        &grads,
        lr_for(settings),
    );
    Ok(LossReport {
        l_ce_mlp,
        l_bce_edge,
        l_ce_node,
        l_adv: 0.0,
        lambda_adv: 0.0,
    })
}

// ---------------------------------------------------------------------------
// Metrics log
// ---------------------------------------------------------------------------

/// Append-only CSV of per-iteration losses.
/// Columns: iter, pass, domain, l_ce_mlp, l_bce_edge, l_ce_node, l_adv, lambda_adv.
/// Source training logs with pass 0; fine-tuning with pass K*+1; both use
/// domain -1.
pub struct MetricsLog {
    file: File,
}

impl MetricsLog {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        writeln!(
            file,
            "iter,pass,domain,l_ce_mlp,l_bce_edge,l_ce_node,l_adv,lambda_adv"
        )
        .map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn append_existing(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    pub fn log(&mut self, iter: usize, pass: usize, domain: i64, report: &LossReport) {
        // losses are finite here (numeric guard runs first); plain Display keeps
        // the shortest round-trip form
        let _ = writeln!(
            self.file,
            "{iter},{pass},{domain},{},{},{},{},{}",
            report.l_ce_mlp, report.l_bce_edge, report.l_ce_node, report.l_adv, report.lambda_adv
        );
    }
}
