//! Multi-target domain adaptation: one labeled source, several unlabeled
//! target domains, one shared classifier.
//!
//! Training couples a dual MLP/graph classifier head with adversarial
//! feature alignment and an uncertainty-ordered curriculum over the target
//! domains: easiest domain first, confidence-thresholded pseudo-labels
//! growing a pseudo-source ledger, the whole pass reiterated `K*` times at a
//! conserved iteration budget, and a final fine-tune on the grown ledger.
//!
//! The crate is example-first; each capability has a runnable walkthrough:
//!
//! ```text
//! examples/
//! ├── train_synthetic.rs        end-to-end adaptation vs source-only baseline
//! ├── dry_run_schedule.rs       schedule + ledger invariants, zero training
//! ├── synthetic_data.rs         dataset generation, export, re-ingestion
//! ├── gradient_check.rs         finite-difference verification (f64)
//! ├── graph_heads.rs            edge affinities + node aggregation mechanics
//! ├── adversarial_alignment.rs  discriminator + gradient reversal in isolation
//! ├── hybrid_backbone.rs        conv-stem + self-attention extractor
//! ├── evaluate_checkpoint.rs    checkpoint round trip, single-sample inference
//! ├── run_directory.rs          persisted-run workflow (config/manifest/report)
//! └── bench_trends.rs           reiteration and batch-composition sweeps
//! ```
//!
//! ```bash
//! cargo run --release --example train_synthetic
//! ```
//!
//! The `mtda` binary wraps the same library surface as `train` / `eval` /
//! `report` subcommands; see the repository README.
//!
//! Modules follow the pipeline: [`data`] (registries, synthetic generator,
//! source-heavy sampler), [`backbone`] (feature extractors), [`heads`]
//! (MLP + edge/node graph classifier), [`adversarial`] (discriminator and
//! gradient reversal), [`losses`] (the three-phase update), [`curriculum`]
//! (the full training engine), [`eval`] (metrics and ledger audit),
//! [`mod@bench`] (trend experiments), and [`cli`] (config + commands). [`nnet`]
//! holds the layer plumbing: explicit backward passes, momentum SGD, and
//! named deterministic RNG streams.

pub mod adversarial;
pub mod backbone;
pub mod bench;
pub mod cli;
pub mod curriculum;
pub mod data;
pub mod error;
pub mod eval;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nnet;
pub mod stub;
pub mod trainer;

pub use error::{Error, Result};
