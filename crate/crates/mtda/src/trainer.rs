//! Bridges the parameter bundle and loss machinery to the curriculum engine.

use std::path::Path;

use ndarray::Array4;

use crate::backbone::image_batch;
use crate::curriculum::{BatchRows, CurriculumModel, HyperParams};
use crate::data::{DatasetRegistry, Sample, SampleKey};
use crate::error::Result;
use crate::losses::{
    combine_and_step, finetune_step, supervised_step, BatchTensors, LossReport, StepContext,
    StepSettings, PROB_EPS,
};
use crate::model::ModelBundle;
use crate::nnet::{argmax_rows, entropy_rows, softmax_rows, Mode, Real, Sgd};

const EVAL_CHUNK: usize = 64;

/// A model bundle plus optimizer state, ready to drive through the engine.
pub struct Trainer<F: Real> {
    pub bundle: ModelBundle<F>,
    pub opt: Sgd<F>,
    settings: StepSettings,
}

impl<F: Real> Trainer<F> {
    pub fn new(bundle: ModelBundle<F>, hp: &HyperParams) -> Self {
        Self {
            bundle,
            opt: Sgd::new(hp.momentum, hp.weight_decay),
            settings: hp.step_settings(),
        }
    }

    fn gather<'r>(reg: &'r DatasetRegistry, rows: &BatchRows) -> Vec<&'r Sample> {
        rows.rows.iter().map(|(k, _)| reg.sample(*k)).collect()
    }

    fn materialize(&self, reg: &DatasetRegistry, rows: &BatchRows) -> BatchTensors<F> {
        let samples = Self::gather(reg, rows);
        let images = image_batch::<F>(&samples);
        let classes: Vec<Option<usize>> = rows.rows.iter().map(|(_, l)| *l).collect();
        let ledger_mask: Vec<bool> = (0..rows.rows.len()).map(|i| i < rows.n_ledger).collect();
        let domain_flags: Vec<u8> = (0..rows.rows.len())
            .map(|i| u8::from(i >= rows.n_ledger))
            .collect();
        BatchTensors {
            images,
            classes,
            ledger_mask,
            domain_flags,
        }
    }

    fn eval_images(&self, reg: &DatasetRegistry, keys: &[SampleKey]) -> Array4<F> {
        let samples: Vec<&Sample> = keys.iter().map(|k| reg.sample(*k)).collect();
        image_batch::<F>(&samples)
    }
}

impl<F: Real> CurriculumModel for Trainer<F> {
    fn supervised_step(
        &mut self,
        reg: &DatasetRegistry,
        rows: &BatchRows,
        ctx: StepContext,
    ) -> Result<f64> {
        let batch = self.materialize(reg, rows);
        supervised_step(
            &mut self.bundle,
            &mut self.opt,
            &batch.images,
            &batch.classes,
            &self.settings,
            ctx,
        )
    }

    fn adapt_step(
        &mut self,
        reg: &DatasetRegistry,
        rows: &BatchRows,
        lambda_adv: f64,
        ctx: StepContext,
    ) -> Result<LossReport> {
        let batch = self.materialize(reg, rows);
        combine_and_step(
            &mut self.bundle,
            &mut self.opt,
            &batch,
            lambda_adv,
            &self.settings,
            ctx,
        )
    }

    fn finetune_step(
        &mut self,
        reg: &DatasetRegistry,
        rows: &BatchRows,
        ctx: StepContext,
    ) -> Result<LossReport> {
        let batch = self.materialize(reg, rows);
        finetune_step(
            &mut self.bundle,
            &mut self.opt,
            &batch.images,
            &batch.classes,
            &self.settings,
            ctx,
        )
    }

    fn mean_uncertainty(&mut self, reg: &DatasetRegistry, keys: &[SampleKey]) -> Result<f64> {
        let mut total = 0.0;
        for chunk in keys.chunks(EVAL_CHUNK) {
            let images = self.eval_images(reg, chunk);
            let (feats, _) = self.bundle.backbone.forward(&images, Mode::Eval)?;
            let probs = softmax_rows(&self.bundle.mlp.forward(&feats));
            total += entropy_rows(&probs, PROB_EPS).iter().sum::<f64>();
        }
        Ok(total / keys.len() as f64)
    }

    fn graph_confidences(
        &mut self,
        reg: &DatasetRegistry,
        context: &[(SampleKey, usize)],
        targets: &[SampleKey],
    ) -> Result<Vec<(usize, f64)>> {
        let mut keys: Vec<SampleKey> = context.iter().map(|(k, _)| *k).collect();
        keys.extend_from_slice(targets);
        let images = self.eval_images(reg, &keys);
        let (feats, _) = self.bundle.backbone.forward(&images, Mode::Eval)?;
        let ecache = self.bundle.edge.forward(&feats)?;
        let (logits, _) = self.bundle.node.forward(&feats, &ecache.affinity)?;
        let probs = softmax_rows(&logits);
        let offset = context.len();
        Ok((0..targets.len())
            .map(|i| {
                let row = probs.row(offset + i);
                let mut best = 0usize;
                let mut best_p = row[0];
                for (c, &p) in row.iter().enumerate().skip(1) {
                    if p > best_p {
                        best = c;
                        best_p = p;
                    }
                }
                (best, crate::nnet::to_f64(best_p))
            })
            .collect())
    }

    fn predict(&mut self, reg: &DatasetRegistry, keys: &[SampleKey]) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(keys.len());
        for chunk in keys.chunks(EVAL_CHUNK) {
            let images = self.eval_images(reg, chunk);
            let (feats, _) = self.bundle.backbone.forward(&images, Mode::Eval)?;
            out.extend(argmax_rows(&self.bundle.mlp.forward(&feats)));
        }
        Ok(out)
    }

    fn reset_optimizer(&mut self) {
        self.opt.reset();
    }

    fn save_checkpoint(&mut self, path: &Path) -> Result<()> {
        self.bundle.save(path)
    }

    fn fingerprint(&mut self) -> String {
        self.bundle.fingerprint()
    }
}
