//! Command-line entry points: `train`, `eval`, `report`.
//!
//! Configuration precedence: built-in defaults, then the config file (nested
//! JSON or flat dotted keys), then `--set key=value` overrides, then explicit
//! flags — flags win. Every run directory receives a config echo, the run
//! manifest, the metrics CSV, and at least one checkpoint.
//!
//! Exit codes: 0 success, 2 config error, 3 runtime abort, 4 I/O error.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneSpec;
use crate::curriculum::{run, HyperParams, RunManifest, RunSinks};
use crate::data::{ingest_directory, make_synthetic, DatasetRegistry};
use crate::error::{Error, Result};
use crate::eval::{evaluate, write_accuracy_curve_svg, EvalReport};
use crate::losses::MetricsLog;
use crate::model::ModelBundle;
use crate::nnet::Real;
use crate::stub::StubModel;
use crate::trainer::Trainer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DataSource {
    /// Procedurally generated multi-domain benchmark.
    Synthetic {
        n_classes: usize,
        shift_magnitudes: Vec<f64>,
        per_class: usize,
        /// Registry seed; defaults to the training seed.
        seed: Option<u64>,
    },
    /// `source/<class>/*` plus `target_*/<class|unlabeled>/*` trees.
    Directory { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    Train,
    /// Full schedule against the instant stub model.
    DryRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F64,
}

/// Everything a run needs, serializable as the config echo.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: DataSource,
    pub backbone: BackboneSpec,
    pub hyperparams: HyperParams,
    pub out_dir: PathBuf,
    pub mode: RunMode,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        let hp = HyperParams::default();
        Self {
            data: DataSource::Synthetic {
                n_classes: 4,
                shift_magnitudes: vec![0.1, 0.3, 0.6],
                per_class: 150,
                seed: None,
            },
            backbone: BackboneSpec::small(64, [8, 16, 32]),
            out_dir: PathBuf::from(format!("runs/train-seed{}", hp.seed)),
            hyperparams: hp,
            mode: RunMode::Train,
            precision: Precision::F32,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyperparams.validate()?;
        self.backbone.validate()?;
        if let DataSource::Synthetic {
            n_classes,
            shift_magnitudes,
            per_class,
            ..
        } = &self.data
        {
            if *n_classes < 2 {
                return Err(Error::Config("data.n_classes must be at least 2".into()));
            }
            if shift_magnitudes.is_empty() {
                return Err(Error::Config("data.shift_magnitudes must be nonempty".into()));
            }
            if *per_class < 10 {
                return Err(Error::Config("data.per_class must be at least 10".into()));
            }
        }
        Ok(())
    }

    pub fn build_registry(&self) -> Result<DatasetRegistry> {
        match &self.data {
            DataSource::Synthetic {
                n_classes,
                shift_magnitudes,
                per_class,
                seed,
            } => make_synthetic(
                *n_classes,
                shift_magnitudes.len(),
                shift_magnitudes,
                *per_class,
                seed.unwrap_or(self.hyperparams.seed),
            ),
            DataSource::Directory { path } => ingest_directory(path),
        }
    }
}

// ---------------------------------------------------------------------------
// Config file loading and dotted-key overrides
// ---------------------------------------------------------------------------

/// Apply one `dotted.path=value` override onto a config.
pub fn apply_override(config: &mut RunConfig, key: &str, raw: &str) -> Result<()> {
    let mut value = serde_json::to_value(&*config).expect("config serializes");
    {
        let mut cursor = &mut value;
        for part in key.split('.') {
            cursor = cursor
                .as_object_mut()
                .and_then(|o| o.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *cursor = parse_scalar(raw);
    }
    *config = serde_json::from_value(value)
        .map_err(|e| Error::Config(format!("invalid value for `{key}`: {e}")))?;
    Ok(())
}

fn parse_scalar(raw: &str) -> serde_json::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return serde_json::Value::Bool(b);
    }
    if let Ok(i) = raw.parse::<i64>() {
        return serde_json::Value::from(i);
    }
    if let Ok(f) = raw.parse::<f64>() {
        return serde_json::Value::from(f);
    }
    if raw.contains(',') {
        // comma list of numbers, e.g. shift magnitudes
        if let Ok(nums) = raw
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
        {
            return serde_json::Value::from(nums);
        }
    }
    serde_json::Value::String(raw.to_string())
}

/// Load a config file: nested `RunConfig` JSON, or a flat object whose dotted
/// keys override the defaults.
pub fn load_config_file(path: impl AsRef<Path>) -> Result<RunConfig> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&raw).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| Error::Config("config file must hold a JSON object".into()))?;
    let flat = obj.keys().any(|k| k.contains('.'));
    if flat {
        let mut config = RunConfig::default();
        for (k, v) in obj {
            let raw = match v {
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            apply_override(&mut config, k, &raw)?;
        }
        Ok(config)
    } else {
        serde_json::from_value(value)
            .map_err(|e| Error::Config(format!("config file does not parse: {e}")))
    }
}

/// Parse `--synthetic k=v ...` arguments onto the data source.
pub fn apply_synthetic_args(config: &mut RunConfig, args: &[String]) -> Result<()> {
    let (mut n_classes, mut shifts, mut per_class, mut seed) = (4usize, vec![0.1, 0.3, 0.6], 150usize, None);
    if let DataSource::Synthetic {
        n_classes: n,
        shift_magnitudes: s,
        per_class: p,
        seed: sd,
    } = &config.data
    {
        n_classes = *n;
        shifts = s.clone();
        per_class = *p;
        seed = *sd;
    }
    let mut n_targets: Option<usize> = None;
    for arg in args {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--synthetic expects key=value, got `{arg}`")))?;
        match k {
            "n_c" | "n_classes" => {
                n_classes = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad n_c `{v}`")))?
            }
            "N" | "n_targets" => {
                n_targets = Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("bad N `{v}`")))?,
                )
            }
            "shifts" | "shift_magnitudes" => {
                shifts = v
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("bad shifts `{v}`")))?
            }
            "per_class" => {
                per_class = v
                    .parse()
                    .map_err(|_| Error::Config(format!("bad per_class `{v}`")))?
            }
            "seed" => {
                seed = Some(
                    v.parse()
                        .map_err(|_| Error::Config(format!("bad seed `{v}`")))?,
                )
            }
            other => return Err(Error::Config(format!("unknown --synthetic key `{other}`"))),
        }
    }
    if let Some(n) = n_targets {
        if n != shifts.len() {
            return Err(Error::Config(format!(
                "N={n} but shifts has {} entries",
                shifts.len()
            )));
        }
    }
    config.data = DataSource::Synthetic {
        n_classes,
        shift_magnitudes: shifts,
        per_class,
        seed,
    };
    Ok(())
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

fn timestamp() -> String {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("{secs}")
}

fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    let mut value = serde_json::to_value(manifest).expect("manifest serializes");
    value
        .as_object_mut()
        .expect("object")
        .insert("created_at".to_string(), serde_json::Value::String(timestamp()));
    fs::write(path, serde_json::to_string_pretty(&value).expect("serializes"))
        .map_err(|e| Error::io(path, e))
}

/// Read a manifest file back, dropping the timestamp wrapper.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut value: serde_json::Value = serde_json::from_str(&raw).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })?;
    if let Some(obj) = value.as_object_mut() {
        obj.remove("created_at");
    }
    serde_json::from_value(value).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn train_generic<F: Real>(
    config: &RunConfig,
    reg: &DatasetRegistry,
    metrics: &mut MetricsLog,
) -> Result<(RunManifest, Option<EvalReport>)> {
    let img_side = reg.source[0].image.dim().1;
    let bundle = ModelBundle::<F>::init(&config.backbone, reg.n_c, img_side, config.hyperparams.seed)?;
    let mut trainer = Trainer::new(bundle, &config.hyperparams);
    let sinks = RunSinks {
        metrics: Some(metrics),
        checkpoint_dir: Some(config.out_dir.clone()),
    };
    let outcome = run(&mut trainer, reg, &config.hyperparams, "train", sinks)?;
    let report = if reg.has_hidden_truth() {
        Some(evaluate(&mut trainer.bundle, reg, Some(&outcome.ledger))?)
    } else {
        None
    };
    Ok((outcome.manifest, report))
}

/// Execute a training (or dry) run and persist all artifacts into the run
/// directory. Returns the manifest.
pub fn cmd_train(config: &RunConfig) -> Result<RunManifest> {
    config.validate()?;
    let reg = config.build_registry()?;
    fs::create_dir_all(&config.out_dir).map_err(|e| Error::io(&config.out_dir, e))?;
    fs::write(
        config.out_dir.join("config.json"),
        serde_json::to_string_pretty(config).expect("config serializes"),
    )
    .map_err(|e| Error::io(config.out_dir.join("config.json"), e))?;

    let mut metrics = MetricsLog::create(config.out_dir.join("metrics.csv"))?;
    let (manifest, report) = match config.mode {
        RunMode::DryRun => {
            let mut stub = StubModel::new(reg.n_c, config.hyperparams.seed);
            let sinks = RunSinks {
                metrics: Some(&mut metrics),
                checkpoint_dir: None,
            };
            let outcome = run(&mut stub, &reg, &config.hyperparams, "dry_run", sinks)?;
            (outcome.manifest, None)
        }
        RunMode::Train => match config.precision {
            Precision::F32 => train_generic::<f32>(config, &reg, &mut metrics)?,
            Precision::F64 => train_generic::<f64>(config, &reg, &mut metrics)?,
        },
    };

    write_manifest(&manifest, &config.out_dir.join("manifest.json"))?;
    if let Some(report) = &report {
        report.write_json(config.out_dir.join("eval_report.json"))?;
        report.write_csv(config.out_dir.join("eval_report.csv"))?;
    }
    let curve: Vec<(usize, f64)> = manifest
        .passes
        .iter()
        .filter_map(|p| p.average_target_accuracy.map(|a| (p.pass, a)))
        .collect();
    if !curve.is_empty() {
        write_accuracy_curve_svg(&curve, config.out_dir.join("accuracy_vs_pass.svg"))?;
    }
    Ok(manifest)
}

/// Evaluate a checkpoint against a dataset; prints per-domain and average
/// accuracy, optionally writing report files.
pub fn cmd_eval(
    checkpoint: &Path,
    data: &DataSource,
    hp_seed: u64,
    out_dir: Option<&Path>,
    precision: Precision,
) -> Result<EvalReport> {
    let reg = match data {
        DataSource::Synthetic {
            n_classes,
            shift_magnitudes,
            per_class,
            seed,
        } => make_synthetic(
            *n_classes,
            shift_magnitudes.len(),
            shift_magnitudes,
            *per_class,
            seed.unwrap_or(hp_seed),
        )?,
        DataSource::Directory { path } => ingest_directory(path)?,
    };
    let report = match precision {
        Precision::F32 => {
            let mut model = ModelBundle::<f32>::load(checkpoint)?;
            evaluate(&mut model, &reg, None)?
        }
        Precision::F64 => {
            let mut model = ModelBundle::<f64>::load(checkpoint)?;
            evaluate(&mut model, &reg, None)?
        }
    };
    for (d, a) in &report.per_domain_accuracy {
        println!("domain {d}: accuracy {a:.4}");
    }
    println!("average target accuracy: {:.4}", report.average_target_accuracy);
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        report.write_json(dir.join("eval_report.json"))?;
        report.write_csv(dir.join("eval_report.csv"))?;
    }
    Ok(report)
}

/// Render the pass-by-pass ingestion table and accuracy curve from a completed
/// run directory. Pure function of the manifest; nothing is recomputed.
pub fn cmd_report(run_dir: &Path) -> Result<String> {
    let manifest_path = run_dir.join("manifest.json");
    if !manifest_path.exists() {
        eprintln!(
            "warning: {} has no manifest.json; run incomplete, nothing to report",
            run_dir.display()
        );
        return Err(Error::io(
            &manifest_path,
            std::io::Error::from(std::io::ErrorKind::NotFound),
        ));
    }
    let manifest = read_manifest(&manifest_path)?;

    let domains: Vec<usize> = (1..=manifest.n_domains).collect();
    let mut table = String::new();
    let mut header = String::from("pass");
    for d in &domains {
        header.push_str(&format!(",domain_{d}"));
    }
    header.push_str(",target_acc");
    table.push_str(&header);
    table.push('\n');
    for pass in &manifest.passes {
        let mut row = format!("{}", pass.pass);
        for d in &domains {
            let added = pass
                .visits
                .iter()
                .find(|v| v.domain_id == *d)
                .map(|v| v.added)
                .unwrap_or(0);
            row.push_str(&format!(",{added}"));
        }
        match pass.average_target_accuracy {
            Some(a) => row.push_str(&format!(",{a:.4}")),
            None => row.push_str(",n/a"),
        }
        table.push_str(&row);
        table.push('\n');
    }
    if manifest.passes.len() < manifest.hyperparams.reiterations {
        eprintln!(
            "warning: manifest holds {} of {} passes; reporting the completed prefix",
            manifest.passes.len(),
            manifest.hyperparams.reiterations
        );
    }
    fs::write(run_dir.join("report_table.csv"), &table)
        .map_err(|e| Error::io(run_dir.join("report_table.csv"), e))?;
    let curve: Vec<(usize, f64)> = manifest
        .passes
        .iter()
        .filter_map(|p| p.average_target_accuracy.map(|a| (p.pass, a)))
        .collect();
    if !curve.is_empty() {
        write_accuracy_curve_svg(&curve, run_dir.join("accuracy_vs_pass.svg"))?;
    }
    print!("{table}");
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let mut cfg = RunConfig::default();
        apply_override(&mut cfg, "hyperparams.tau", "0.9").unwrap();
        assert_eq!(cfg.hyperparams.tau, 0.9);
        apply_override(&mut cfg, "hyperparams.adapt_iters", "3000").unwrap();
        assert_eq!(cfg.hyperparams.adapt_iters, 3000);
        apply_override(&mut cfg, "backbone.d_f", "128").unwrap();
        assert_eq!(cfg.backbone.d_f, 128);
        apply_override(&mut cfg, "precision", "f64").unwrap();
        assert_eq!(cfg.precision, Precision::F64);
        assert!(apply_override(&mut cfg, "no.such.key", "1").is_err());
        assert!(apply_override(&mut cfg, "hyperparams.tau", "not-a-number").is_err());
    }

    #[test]
    fn flat_config_file_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("run.json");
        fs::write(
            &path,
            r#"{"hyperparams.adapt_iters": 900, "hyperparams.reiterations": 3, "backbone.d_f": 32}"#,
        )
        .unwrap();
        let cfg = load_config_file(&path).unwrap();
        assert_eq!(cfg.hyperparams.adapt_iters, 900);
        assert_eq!(cfg.backbone.d_f, 32);

        // nested form parses too
        let nested = tmp.path().join("nested.json");
        fs::write(&nested, serde_json::to_string(&cfg).unwrap()).unwrap();
        let back = load_config_file(&nested).unwrap();
        assert_eq!(back.hyperparams.adapt_iters, 900);
    }

    #[test]
    fn synthetic_args_parse_and_check_arity() {
        let mut cfg = RunConfig::default();
        apply_synthetic_args(
            &mut cfg,
            &[
                "n_c=5".to_string(),
                "N=2".to_string(),
                "shifts=0.2,0.5".to_string(),
                "per_class=20".to_string(),
            ],
        )
        .unwrap();
        match &cfg.data {
            DataSource::Synthetic {
                n_classes,
                shift_magnitudes,
                per_class,
                ..
            } => {
                assert_eq!(*n_classes, 5);
                assert_eq!(shift_magnitudes, &vec![0.2, 0.5]);
                assert_eq!(*per_class, 20);
            }
            _ => panic!("expected synthetic source"),
        }
        let err = apply_synthetic_args(
            &mut cfg,
            &["N=3".to_string(), "shifts=0.1,0.2".to_string()],
        )
        .unwrap_err();
        assert!(err.to_string().contains("shifts has 2 entries"));
    }

    #[test]
    fn validation_names_the_offending_key() {
        let mut cfg = RunConfig::default();
        cfg.hyperparams.adapt_iters = 1000;
        cfg.hyperparams.reiterations = 3;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("K not divisible by K*"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn dry_run_writes_artifacts_quickly() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.mode = RunMode::DryRun;
        cfg.out_dir = tmp.path().join("dry");
        apply_override(&mut cfg, "data.per_class", "12").unwrap();
        apply_override(&mut cfg, "hyperparams.adapt_iters", "300").unwrap();
        apply_override(&mut cfg, "hyperparams.finetune_iters", "5").unwrap();
        let started = std::time::Instant::now();
        let manifest = cmd_train(&cfg).unwrap();
        assert!(started.elapsed().as_secs_f64() < 5.0);
        assert_eq!(manifest.mode, "dry_run");
        assert!(cfg.out_dir.join("config.json").exists());
        assert!(cfg.out_dir.join("manifest.json").exists());
        assert!(cfg.out_dir.join("metrics.csv").exists());
        // report renders from the manifest alone
        let table = cmd_report(&cfg.out_dir).unwrap();
        assert!(table.starts_with("pass,domain_1,domain_2,domain_3,target_acc"));
        assert_eq!(table.lines().count(), 1 + manifest.passes.len());
    }

    #[test]
    fn report_on_missing_run_is_io_error() {
        let tmp = tempfile::tempdir().unwrap();
        let err = cmd_report(tmp.path()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }
}
