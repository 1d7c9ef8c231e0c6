//! Inference and metric computation: per-domain accuracy, confusion counts,
//! and the pseudo-sample ledger audit against hidden ground truth.
//!
//! Headline metrics always come from the MLP head: it is per-sample and needs
//! no batch context at inference time. A graph-head evaluation mode (ledger
//! context batches) is provided for diagnostics only.

use std::path::Path;

use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::backbone::image_batch;
use crate::curriculum::{HyperParams, LedgerEntry, PseudoSourceLedger};
use crate::data::{DatasetRegistry, EpochCursor, Sample, SampleKey};
use crate::error::{Error, Result};
use crate::model::ModelBundle;
use crate::nnet::{argmax_rows, softmax_rows, stream_rng, Mode, Real};

const EVAL_CHUNK: usize = 64;

/// Per-(pass, domain) pseudo-sample audit cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditCell {
    pub pass: usize,
    pub domain_id: usize,
    pub correct: usize,
    pub incorrect: usize,
}

/// Evaluation results over the target domains.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    /// `(domain_id, accuracy)` for every target domain.
    pub per_domain_accuracy: Vec<(usize, f64)>,
    /// Unweighted mean of the per-domain accuracies.
    pub average_target_accuracy: f64,
    /// Aggregated confusion counts over all target domains:
    /// `confusion[true][pred]`.
    pub confusion: Vec<Vec<usize>>,
    /// Ledger audit per (pass, domain); empty when ground truth is missing.
    pub ledger_audit: Vec<AuditCell>,
}

/// MLP-head class predictions for arbitrary samples; works on a single sample
/// and is independent of batch composition.
pub fn predict<F: Real>(model: &mut ModelBundle<F>, samples: &[&Sample]) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let images: Array4<F> = image_batch(chunk);
        let (feats, _) = model.backbone.forward(&images, Mode::Eval)?;
        out.extend(argmax_rows(&model.mlp.forward(&feats)));
    }
    Ok(out)
}

/// Graph-head predictions for diagnostics: each chunk of samples is scored
/// inside a batch with labeled ledger context.
pub fn predict_graph<F: Real>(
    model: &mut ModelBundle<F>,
    reg: &DatasetRegistry,
    ledger: &PseudoSourceLedger,
    samples: &[SampleKey],
    hp: &HyperParams,
) -> Result<Vec<usize>> {
    let mut cursor = EpochCursor::new(ledger.len(), stream_rng(hp.seed, "eval-graph"));
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(hp.batch_target.max(1)) {
        let context: Vec<&Sample> = cursor
            .take(hp.batch_source)
            .into_iter()
            .map(|i| reg.sample(ledger.entry(i).key))
            .collect();
        let mut batch: Vec<&Sample> = context;
        batch.extend(chunk.iter().map(|k| reg.sample(*k)));
        let images: Array4<F> = image_batch(&batch);
        let (feats, _) = model.backbone.forward(&images, Mode::Eval)?;
        let ecache = model.edge.forward(&feats)?;
        let (logits, _) = model.node.forward(&feats, &ecache.affinity)?;
        let preds = argmax_rows(&softmax_rows(&logits));
        out.extend_from_slice(&preds[hp.batch_source..]);
    }
    Ok(out)
}

/// Compare assigned pseudo-labels against hidden ground truth, grouped by
/// (pass, domain). Origin source entries are excluded. Returns an empty audit
/// (with a warning on stderr) when truth is unavailable.
pub fn audit_ledger(reg: &DatasetRegistry, ledger: &PseudoSourceLedger) -> Vec<AuditCell> {
    if !reg.has_hidden_truth() {
        eprintln!("warning: no hidden ground truth available; ledger audit skipped");
        return Vec::new();
    }
    let mut cells: Vec<AuditCell> = Vec::new();
    let non_origin: Vec<&LedgerEntry> = ledger
        .entries()
        .iter()
        .skip(ledger.origin_count())
        .collect();
    for e in non_origin {
        let hit = reg.hidden_truth(e.key) == Some(e.label);
        let cell = cells
            .iter_mut()
            .find(|c| c.pass == e.pass_added && c.domain_id == e.key.domain_id);
        let cell = match cell {
            Some(c) => c,
            None => {
                cells.push(AuditCell {
                    pass: e.pass_added,
                    domain_id: e.key.domain_id,
                    correct: 0,
                    incorrect: 0,
                });
                cells.last_mut().unwrap()
            }
        };
        if hit {
            cell.correct += 1;
        } else {
            cell.incorrect += 1;
        }
    }
    cells.sort_by_key(|c| (c.pass, c.domain_id));
    cells
}

/// Full evaluation of a model over every target domain of a registry.
pub fn evaluate<F: Real>(
    model: &mut ModelBundle<F>,
    reg: &DatasetRegistry,
    ledger: Option<&PseudoSourceLedger>,
) -> Result<EvalReport> {
    if !reg.has_hidden_truth() {
        return Err(Error::Config(
            "evaluation needs hidden ground truth (synthetic or labeled target trees)".into(),
        ));
    }
    let n_c = reg.n_c;
    let mut confusion = vec![vec![0usize; n_c]; n_c];
    let mut per_domain = Vec::new();
    for d in 1..=reg.n_targets() {
        let samples: Vec<&Sample> = reg.target(d).iter().collect();
        let preds = predict(model, &samples)?;
        let mut correct = 0usize;
        for (i, &p) in preds.iter().enumerate() {
            let truth = reg
                .hidden_truth(SampleKey {
                    domain_id: d,
                    index: i,
                })
                .expect("truth present");
            confusion[truth][p] += 1;
            if truth == p {
                correct += 1;
            }
        }
        per_domain.push((d, correct as f64 / samples.len() as f64));
    }
    let average = per_domain.iter().map(|(_, a)| a).sum::<f64>() / per_domain.len() as f64;
    let ledger_audit = ledger.map(|l| audit_ledger(reg, l)).unwrap_or_default();
    Ok(EvalReport {
        per_domain_accuracy: per_domain,
        average_target_accuracy: average,
        confusion,
        ledger_audit,
    })
}

impl EvalReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self).expect("serializes"))
            .map_err(|e| Error::io(path, e))
    }

    /// CSV with one row per domain plus the average.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = String::from("domain,accuracy\n");
        for (d, a) in &self.per_domain_accuracy {
            text.push_str(&format!("{d},{a}\n"));
        }
        text.push_str(&format!("average,{}\n", self.average_target_accuracy));
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Accuracy-vs-pass curve as a small self-contained SVG.
pub fn write_accuracy_curve_svg(
    points: &[(usize, f64)],
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    let (w, h, ml, mb) = (480.0, 320.0, 50.0, 40.0);
    let plot_w = w - ml - 20.0;
    let plot_h = h - mb - 20.0;
    let x_of = |p: usize| ml + plot_w * (p as f64 / points.len().max(1) as f64);
    let y_of = |a: f64| h - mb - plot_h * a;
    let mut svg = format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">
<rect width="{w}" height="{h}" fill="white"/>
<line x1="{ml}" y1="{y0}" x2="{xr}" y2="{y0}" stroke="black"/>
<line x1="{ml}" y1="{y0}" x2="{ml}" y2="20" stroke="black"/>
<text x="{ml}" y="{h}" font-size="12" dy="-4">pass</text>
<text x="8" y="24" font-size="12">avg target accuracy</text>
"##,
        y0 = h - mb,
        xr = w - 20.0,
    );
    for frac in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let y = y_of(frac);
        svg.push_str(&format!(
            r##"<text x="14" y="{y}" font-size="10" dy="3">{frac:.2}</text>
<line x1="{x0}" y1="{y}" x2="{x1}" y2="{y}" stroke="#ddd"/>
"##,
            x0 = ml,
            x1 = w - 20.0,
        ));
    }
    let coords: Vec<String> = points
        .iter()
        .map(|(p, a)| format!("{:.1},{:.1}", x_of(*p), y_of(*a)))
        .collect();
    svg.push_str(&format!(
        r##"<polyline points="{}" fill="none" stroke="#1a6fb4" stroke-width="2"/>
"##,
        coords.join(" ")
    ));
    for (p, a) in points {
        svg.push_str(&format!(
            r##"<circle cx="{:.1}" cy="{:.1}" r="3" fill="#1a6fb4"/>
<text x="{:.1}" y="{y0}" font-size="10" dy="14" text-anchor="middle">{p}</text>
"##,
            x_of(*p),
            y_of(*a),
            x_of(*p),
            y0 = h - mb,
        ));
    }
    svg.push_str("</svg>\n");
    std::fs::write(path, svg).map_err(|e| Error::io(path, e))
}
