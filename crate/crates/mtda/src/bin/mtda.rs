//! Thin command-line front end; all logic lives in the library.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mtda::cli::{
    apply_override, apply_synthetic_args, cmd_eval, cmd_report, cmd_train, load_config_file,
    DataSource, Precision, RunConfig, RunMode,
};

#[derive(Parser)]
#[command(name = "mtda", about = "Multi-target domain adaptation toolkit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the full training procedure and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Render tables and plots from a completed run directory.
    Report(ReportArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file (nested RunConfig JSON or flat dotted keys).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Use the synthetic generator; accepts key=value pairs
    /// (n_c, N, shifts, per_class, seed).
    #[arg(long, num_args = 0.., value_name = "KEY=VALUE")]
    synthetic: Option<Vec<String>>,
    /// Ingest a dataset directory instead of generating one.
    #[arg(long, value_name = "DIR", conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Total adaptation iterations per domain (K).
    #[arg(long = "K")]
    adapt_iters: Option<usize>,
    /// Reiteration count (K*).
    #[arg(long = "Kstar")]
    reiterations: Option<usize>,
    /// Fine-tuning iterations (K').
    #[arg(long = "Kprime")]
    finetune_iters: Option<usize>,
    /// Pseudo-source rows per minibatch (B_s).
    #[arg(long = "Bs")]
    batch_source: Option<usize>,
    /// Target rows per minibatch (B_t).
    #[arg(long = "Bt")]
    batch_target: Option<usize>,
    /// Confidence threshold for pseudo-labeling.
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output run directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Schedule-only run against the instant stub model.
    #[arg(long)]
    dry_run: bool,
    /// Numeric precision of the training run.
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    /// Generic dotted-key override, e.g. --set hyperparams.base_lr=0.002
    /// (repeatable; applied before the explicit flags above).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file written by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory to evaluate on.
    #[arg(long, value_name = "DIR")]
    data: Option<PathBuf>,
    /// Synthetic dataset spec, as in `train --synthetic`.
    #[arg(long, num_args = 0.., value_name = "KEY=VALUE", conflicts_with = "data")]
    synthetic: Option<Vec<String>>,
    /// Seed for a synthetic dataset when none is given in the spec.
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Where to write report files (prints to stdout regardless).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
}

#[derive(Args)]
struct ReportArgs {
    /// Completed run directory (containing manifest.json).
    run_dir: PathBuf,
}

fn parse_precision(raw: &str) -> Result<Precision, String> {
    match raw {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(format!("precision must be f32 or f64, got {other}")),
    }
}

fn build_train_config(args: &TrainArgs) -> mtda::Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => load_config_file(path)?,
        None => RunConfig::default(),
    };
    for kv in &args.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            mtda::Error::Config(format!("--set expects key=value, got `{kv}`"))
        })?;
        apply_override(&mut config, k, v)?;
    }
    if let Some(synth) = &args.synthetic {
        apply_synthetic_args(&mut config, synth)?;
    }
    if let Some(dir) = &args.data {
        config.data = DataSource::Directory { path: dir.clone() };
    }
    if let Some(v) = args.adapt_iters {
        config.hyperparams.adapt_iters = v;
    }
    if let Some(v) = args.reiterations {
        config.hyperparams.reiterations = v;
    }
    if let Some(v) = args.finetune_iters {
        config.hyperparams.finetune_iters = v;
    }
    if let Some(v) = args.batch_source {
        config.hyperparams.batch_source = v;
    }
    if let Some(v) = args.batch_target {
        config.hyperparams.batch_target = v;
    }
    if let Some(v) = args.tau {
        config.hyperparams.tau = v;
    }
    if let Some(v) = args.seed {
        config.hyperparams.seed = v;
        if args.out.is_none() {
            config.out_dir = PathBuf::from(format!("runs/train-seed{v}"));
        }
    }
    if let Some(v) = &args.out {
        config.out_dir = v.clone();
    }
    if args.dry_run {
        config.mode = RunMode::DryRun;
    }
    if let Some(p) = args.precision {
        config.precision = p;
    }
    Ok(config)
}

fn dispatch(cli: Cli) -> mtda::Result<()> {
    match cli.command {
        Command::Train(args) => {
            let config = build_train_config(&args)?;
            let manifest = cmd_train(&config)?;
            println!("run directory: {}", config.out_dir.display());
            println!(
                "source accuracy: {:.4} ({} iterations)",
                manifest.source_training.source_accuracy, manifest.source_training.iterations
            );
            if let (Some(b), Some(f)) = (&manifest.baseline, &manifest.final_eval) {
                println!(
                    "average target accuracy: {:.4} -> {:.4} ({:+.2} points)",
                    b.average,
                    f.average,
                    100.0 * (f.average - b.average)
                );
            }
            Ok(())
        }
        Command::Eval(args) => {
            let data = if let Some(dir) = &args.data {
                DataSource::Directory { path: dir.clone() }
            } else {
                let mut cfg = RunConfig::default();
                apply_synthetic_args(&mut cfg, args.synthetic.as_deref().unwrap_or(&[]))?;
                cfg.data
            };
            cmd_eval(
                &args.checkpoint,
                &data,
                args.seed,
                args.out.as_deref(),
                args.precision.unwrap_or(Precision::F32),
            )?;
            Ok(())
        }
        Command::Report(args) => {
            cmd_report(&args.run_dir)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
