//! Instant stand-in model for dry-run scheduling.
//!
//! Every answer is a deterministic hash of (seed, identity, call state), so a
//! dry run exercises the full engine — selection, iteration budgeting, ledger
//! growth and dedup, manifest layout — in milliseconds and reproducibly,
//! without touching any pixels.

use std::path::Path;

use crate::curriculum::{BatchRows, CurriculumModel};
use crate::data::{DatasetRegistry, SampleKey};
use crate::error::Result;
use crate::losses::{LossReport, StepContext};

fn mix(mut h: u64, v: u64) -> u64 {
    h ^= v;
    h = h.wrapping_mul(0x0000_0100_0000_01b3);
    h ^= h >> 33;
    h
}

fn hash01(seed: u64, a: u64, b: u64, c: u64) -> f64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    h = mix(h, seed);
    h = mix(h, a);
    h = mix(h, b);
    h = mix(h, c);
    (h >> 11) as f64 / (1u64 << 53) as f64
}

pub struct StubModel {
    pub n_c: usize,
    pub seed: u64,
    pub adapt_calls: usize,
    pub supervised_calls: usize,
    pub finetune_calls: usize,
    constant_uncertainty: Option<f64>,
}

impl StubModel {
    pub fn new(n_c: usize, seed: u64) -> Self {
        Self {
            n_c,
            seed,
            adapt_calls: 0,
            supervised_calls: 0,
            finetune_calls: 0,
            constant_uncertainty: None,
        }
    }

    /// Stub whose uncertainty is the same for every domain, for tie-break tests.
    pub fn constant_uncertainty(n_c: usize, h: f64) -> Self {
        Self {
            constant_uncertainty: Some(h),
            ..Self::new(n_c, 0)
        }
    }

    fn key_class(&self, key: SampleKey) -> usize {
        (hash01(self.seed, key.domain_id as u64, key.index as u64, 1) * self.n_c as f64) as usize
            % self.n_c
    }
}

impl CurriculumModel for StubModel {
    fn supervised_step(
        &mut self,
        _reg: &DatasetRegistry,
        _rows: &BatchRows,
        _ctx: StepContext,
    ) -> Result<f64> {
        self.supervised_calls += 1;
        Ok(1.0 / (1.0 + self.supervised_calls as f64))
    }

    fn adapt_step(
        &mut self,
        _reg: &DatasetRegistry,
        _rows: &BatchRows,
        lambda_adv: f64,
        _ctx: StepContext,
    ) -> Result<LossReport> {
        self.adapt_calls += 1;
        let t = 1.0 / (1.0 + self.adapt_calls as f64);
        Ok(LossReport {
            l_ce_mlp: t,
            l_bce_edge: t * 0.5,
            l_ce_node: t * 0.3,
            l_adv: std::f64::consts::LN_2,
            lambda_adv,
        })
    }

    fn finetune_step(
        &mut self,
        _reg: &DatasetRegistry,
        _rows: &BatchRows,
        _ctx: StepContext,
    ) -> Result<LossReport> {
        self.finetune_calls += 1;
        let t = 1.0 / (1.0 + self.finetune_calls as f64);
        Ok(LossReport {
            l_ce_mlp: t,
            l_bce_edge: t * 0.5,
            l_ce_node: t * 0.3,
            l_adv: 0.0,
            lambda_adv: 0.0,
        })
    }

    fn mean_uncertainty(&mut self, _reg: &DatasetRegistry, keys: &[SampleKey]) -> Result<f64> {
        if let Some(h) = self.constant_uncertainty {
            return Ok(h);
        }
        let domain = keys[0].domain_id as u64;
        Ok(hash01(self.seed, domain, self.adapt_calls as u64, 2))
    }

    fn graph_confidences(
        &mut self,
        _reg: &DatasetRegistry,
        _context: &[(SampleKey, usize)],
        targets: &[SampleKey],
    ) -> Result<Vec<(usize, f64)>> {
        Ok(targets
            .iter()
            .map(|k| {
                let w = hash01(
                    self.seed,
                    k.domain_id as u64 * 1_000_003 + k.index as u64,
                    self.adapt_calls as u64,
                    3,
                );
                (self.key_class(*k), w)
            })
            .collect())
    }

    fn predict(&mut self, _reg: &DatasetRegistry, keys: &[SampleKey]) -> Result<Vec<usize>> {
        Ok(keys.iter().map(|k| self.key_class(*k)).collect())
    }

    fn reset_optimizer(&mut self) {}

    fn save_checkpoint(&mut self, _path: &Path) -> Result<()> {
        Ok(())
    }

    fn fingerprint(&mut self) -> String {
        format!("stub-{}-{}", self.seed, self.adapt_calls)
    }
}
