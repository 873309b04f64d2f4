//! `vpl`: generate the synthetic benchmark, train, evaluate, check gradients,
//! dump contribution scores and regenerate run reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use vpl_core::gradsuite::{run_suite, SuiteModule, TOLERANCE};
use vpl_core::model::load_checkpoint;
use vpl_core::perturb::salient_set;
use vpl_core::synth::{generate, read_dataset, write_dataset, Split, SynthConfig};
use vpl_core::train::{
    check_compatible, evaluate, export_report, read_metrics, region_scores, train_with, write_curves, write_summary,
    EvalMode, PhaseOrder, TrainConfig,
};

#[derive(Parser)]
#[command(name = "vpl", version, about = "Visual perturbation-aware collaborative learning on synthetic VQA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset from a key=value config.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and write metrics, embeddings, curves and a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Phase order: algorithm1 (class-aware first) or prose (relation-aware first).
        #[arg(long)]
        order: Option<PhaseOrder>,
    },
    /// VQA accuracy of a checkpoint, as CSV on stdout.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Finite-difference gradient checks; exits 1 if any error exceeds the tolerance.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: SuiteModule,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-region contribution scores and salient-set membership as CSV.
    Inspect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Training config supplying tau and the scoring rule.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Regenerate curves.svg and summary.txt from a run's metrics.csv.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn train_config(path: Option<&Path>) -> Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => TrainConfig::read(p)?,
        None => TrainConfig::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn synth(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => SynthConfig::read(p)?,
        None => SynthConfig::default(),
    };
    let ds = generate(&cfg)?;
    write_dataset(&ds, out).with_context(|| format!("writing dataset to {}", out.display()))?;
    println!("wrote {} train and {} test instances to {}", ds.train.len(), ds.test.len(), out.display());
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, out: &Path, order: Option<PhaseOrder>) -> Result<()> {
    let ds = read_dataset(data)?;
    let mut cfg = train_config(config)?;
    if let Some(o) = order {
        cfg.order = o;
    }
    check_compatible(&cfg, &ds)?;
    let outcome = train_with(&cfg, &ds, |_| {})?;
    export_report(&outcome.history, &outcome.model, &ds, &cfg, out)?;
    if let Some(last) = outcome.history.last() {
        println!(
            "epochs {} train_acc {:.4} test_acc {:.4}; artifacts in {}",
            outcome.history.len(),
            last.train_acc,
            last.test_acc,
            out.display()
        );
    }
    Ok(())
}

fn eval(data: &Path, checkpoint: &Path, split: Split) -> Result<()> {
    let ds = read_dataset(data)?;
    let model = load_checkpoint(checkpoint)?;
    let report = evaluate(&model, &ds, split, EvalMode::VqaAccuracy)?;
    let mut out = String::from("split,scope,accuracy\n");
    let _ = writeln!(out, "{},overall,{}", split.name(), report.overall);
    for (q, a) in report.per_type.iter().enumerate() {
        let _ = writeln!(out, "{},q{q},{a}", split.name());
    }
    print!("{out}");
    Ok(())
}

fn gradcheck(module: SuiteModule, eps: f64, seed: u64) -> Result<bool> {
    let entries = run_suite(module, seed, eps)?;
    let mut ok = true;
    for e in &entries {
        let pass = e.passed();
        ok &= pass;
        println!(
            "{:<24} max_rel_error {:.3e}  checked {:>4}  skipped {:>3}  {}",
            e.name,
            e.report.max_rel_error,
            e.report.checked,
            e.report.skipped,
            if pass { "ok" } else { "FAIL" }
        );
    }
    println!("tolerance {TOLERANCE:e}: {}", if ok { "all passed" } else { "failures" });
    Ok(ok)
}

fn inspect(data: &Path, checkpoint: &Path, out: &Path, config: Option<&Path>, split: Split) -> Result<()> {
    let ds = read_dataset(data)?;
    let model = load_checkpoint(checkpoint)?;
    let cfg = train_config(config)?;
    let records = ds.split(split);
    let mut csv = String::from("instance_id,region_index,score,is_salient\n");
    for (c, chunk) in records.chunks(cfg.batch_size.max(1)).enumerate() {
        let views: Vec<_> = chunk.iter().map(|r| r.training_view()).collect();
        let scores = region_scores(&model, &views, cfg.score_target, cfg.score_reduction)?;
        for (j, s) in scores.iter().enumerate() {
            let id = c * cfg.batch_size.max(1) + j;
            let salient = salient_set(&s.score, cfg.tau)?;
            for (n, v) in s.score.scores.iter().enumerate() {
                let _ = writeln!(csv, "{id},{n},{v},{}", u8::from(salient.contains(&n)));
            }
        }
    }
    std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    println!("wrote scores for {} instances to {}", records.len(), out.display());
    Ok(())
}

fn report(run: &Path) -> Result<()> {
    let history = read_metrics(&run.join("metrics.csv"))?;
    write_curves(&history, &run.join("curves.svg"))?;
    write_summary(&history, &run.join("summary.txt"))?;
    println!("regenerated curves.svg and summary.txt for {} epochs", history.len());
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth { config, out } => synth(config.as_deref(), &out)?,
        Command::Train {
            data,
            config,
            out,
            order,
        } => train(&data, config.as_deref(), &out, order)?,
        Command::Eval { data, checkpoint, split } => eval(&data, &checkpoint, split)?,
        Command::Gradcheck { module, eps, seed } => return gradcheck(module, eps, seed),
        Command::Inspect {
            data,
            checkpoint,
            out,
            config,
            split,
        } => inspect(&data, &checkpoint, &out, config.as_deref(), split)?,
        Command::Report { run } => report(&run)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
