use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cmntm_core::harness::experiments::{
    ablate_num_memories, ablation_csv, memory_retention, timing, timing_csv, timing_is_monotone, turn_importance,
    turn_order, Scored,
};
use cmntm_core::harness::{
    datasets, evaluate, evaluate_oracle, run_training, transaction_gradcheck, GradcheckShape, METRICS_HEADER,
};
use cmntm_core::synthdata::{load_dataset, save_dataset};
use cmntm_core::{CascadeConfig, Checkpoint, ModelKind, RunConfig, SyntheticDataset, Trainer};

#[derive(Parser)]
#[command(
    name = "cmntm",
    version,
    about = "Cascaded memory models for multi-turn feature retrieval"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct Probe {
    #[command(flatten)]
    common: Common,
    /// Trained model checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset to probe; the checkpoint's test split when omitted.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate train, validation and test splits.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model, writing metrics.csv and a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from a checkpoint instead of initialising.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Final-turn recall of a checkpoint, or of an untrained model from the
    /// configuration when no checkpoint is given.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        model: Option<ModelKind>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Finite-difference check of the full transaction loss.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 2)]
        stages: usize,
        #[arg(long, default_value_t = 3)]
        turns: usize,
        #[arg(long, default_value_t = 2)]
        batch: usize,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
    },
    /// Train and test one cascade per number of memories.
    AblateMemories {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4])]
        stages: Vec<usize>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Recall as a function of the number of history turns given as input.
    TurnImportance {
        #[command(flatten)]
        probe: Probe,
        /// Memory-less comparator checkpoint.
        #[arg(long)]
        baseline: PathBuf,
    },
    /// Final-turn agreement between original and reversed turn order.
    TurnOrder {
        #[command(flatten)]
        probe: Probe,
    },
    /// Turn-1 block-match rate of stateful and state-reset inference.
    MemoryRetention {
        #[command(flatten)]
        probe: Probe,
    },
    /// Inference time per transaction across numbers of memories.
    Time {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8])]
        stages: Vec<usize>,
        #[arg(long, default_value_t = 16)]
        locations: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        /// Adds the checkpoint's test recall to its matching row.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Allowed drop in milliseconds when checking monotonicity.
        #[arg(long, default_value_t = 1e-3)]
        tolerance_ms: f64,
    },
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let cfg = match &c.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    Ok(match c.seed {
        Some(s) => cfg.with_seed(s),
        None => cfg,
    })
}

fn out_dir(c: &Common) -> Result<&Path> {
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(&c.out)
}

fn write_report(dir: &Path, stem: &str, csv: Option<&str>, summary: &serde_json::Value) -> Result<()> {
    if let Some(csv) = csv {
        fs::write(dir.join(format!("{stem}.csv")), csv)?;
    }
    let text = serde_json::to_string_pretty(summary)?;
    fs::write(dir.join(format!("{stem}.json")), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn load_trainer(path: &Path) -> Result<Trainer> {
    let ckpt = Checkpoint::load(path)?;
    Ok(Trainer::from_checkpoint(&ckpt)?)
}

fn probe_data(cfg: &RunConfig, data: &Option<PathBuf>) -> Result<SyntheticDataset> {
    Ok(match data {
        Some(p) => load_dataset(p)?,
        None => {
            let [_, _, test] = datasets(cfg)?;
            test
        }
    })
}

fn gen_data(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    cfg.validate()?;
    let dir = out_dir(common)?;
    let splits = datasets(&cfg)?;
    let mut files = Vec::new();
    for ds in &splits {
        let path = dir.join(format!("{}.jsonl", ds.split.as_str()));
        save_dataset(ds, &path)?;
        files.push(json!({"split": ds.split.as_str(), "path": path, "transactions": ds.transactions.len()}));
    }
    fs::write(dir.join("config.json"), cfg.to_json())?;
    let summary = json!({
        "task": cfg.task,
        "splits": files,
        "oracle_test": evaluate_oracle(&splits[2])?,
    });
    write_report(dir, "gen_data", None, &summary)
}

fn train(common: &Common, model: Option<ModelKind>, epochs: Option<usize>, resume: &Option<PathBuf>) -> Result<()> {
    let dir = out_dir(common)?.to_path_buf();
    let mut trainer = match resume {
        Some(p) => load_trainer(p)?,
        None => {
            let mut cfg = load_config(common)?;
            if let Some(m) = model {
                cfg.train.model = m;
            }
            Trainer::new(cfg)?
        }
    };
    if let Some(e) = epochs {
        trainer.config.train.epochs = e;
    }
    let t = trainer.config.train.clone();
    let ckpt_path = t.checkpoint_path.clone().unwrap_or_else(|| dir.join("checkpoint.cmnt"));
    let metrics_path = t.metrics_path.clone().unwrap_or_else(|| dir.join("metrics.csv"));
    let [train_ds, val_ds, test_ds] = datasets(&trainer.config)?;

    let append = resume.is_some() && metrics_path.exists();
    let mut metrics = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&metrics_path)
        .with_context(|| format!("opening {}", metrics_path.display()))?;
    if !append {
        writeln!(metrics, "{METRICS_HEADER}")?;
    }
    let rows = run_training(&mut trainer, &train_ds, &val_ds, |tr, row| {
        writeln!(metrics, "{}", row.csv())?;
        metrics.flush()?;
        eprintln!(
            "epoch {} loss {:.5} val r5 {:.4} mean_r5_r8 {:.4}",
            row.epoch, row.train_loss, row.val.r5, row.val.mean_r5_r8
        );
        if t.checkpoint_every > 0 && row.epoch % t.checkpoint_every as u64 == 0 {
            tr.checkpoint().save(&ckpt_path)?;
        }
        Ok(())
    })?;
    trainer.checkpoint().save(&ckpt_path)?;
    let summary = json!({
        "model": trainer.config.train.model.as_str(),
        "epochs": trainer.epoch,
        "checkpoint": ckpt_path,
        "metrics": metrics_path,
        "last_epoch": rows.last().map(|r| json!({"train_loss": r.train_loss, "val": r.val})),
        "test": trainer.evaluate(&test_ds)?,
    });
    write_report(&dir, "train", None, &summary)
}

fn eval(common: &Common, checkpoint: &Option<PathBuf>, model: Option<ModelKind>, data: &Option<PathBuf>) -> Result<()> {
    let trainer = match checkpoint {
        Some(p) => load_trainer(p)?,
        None => {
            let mut cfg = load_config(common)?;
            if let Some(m) = model {
                cfg.train.model = m;
            }
            Trainer::new(cfg)?
        }
    };
    let ds = probe_data(&trainer.config, data)?;
    let seed = common.seed.unwrap_or(trainer.config.train.seed);
    let report = evaluate(&trainer.model, &trainer.store, &ds, seed)?;
    let summary = json!({
        "model": trainer.config.train.model.as_str(),
        "split": ds.split.as_str(),
        "report": report,
    });
    write_report(out_dir(common)?, "eval", None, &summary)
}

fn gradcheck(common: &Common, shape: GradcheckShape, step: f64, tolerance: f64) -> Result<()> {
    let r = transaction_gradcheck(&shape, common.seed.unwrap_or(0), step)?;
    let pass = r.max_rel_error <= tolerance;
    let summary = json!({
        "stages": shape.stages,
        "locations": shape.locations,
        "width": shape.width,
        "features": shape.features,
        "hidden": shape.hidden,
        "turns": shape.turns,
        "batch": shape.batch,
        "step": step,
        "tolerance": tolerance,
        "result": r,
        "pass": pass,
    });
    write_report(out_dir(common)?, "gradcheck", None, &summary)?;
    if !pass {
        bail!("max relative error {} exceeds {tolerance}", r.max_rel_error);
    }
    Ok(())
}

fn ablate(common: &Common, stages: &[usize], epochs: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let [train_ds, val_ds, test_ds] = datasets(&cfg)?;
    let rows = ablate_num_memories(&cfg, stages, &train_ds, &val_ds, &test_ds)?;
    let summary = json!({"epochs": cfg.train.epochs, "rows": rows});
    write_report(out_dir(common)?, "ablation", Some(&ablation_csv(&rows)), &summary)
}

fn probe_setup(p: &Probe) -> Result<(Trainer, SyntheticDataset, u64)> {
    let tr = load_trainer(&p.checkpoint)?;
    let ds = probe_data(&tr.config, &p.data)?;
    let seed = p.common.seed.unwrap_or(tr.config.train.seed);
    Ok((tr, ds, seed))
}

fn run_turn_importance(p: &Probe, baseline: &Path) -> Result<()> {
    let (tr, ds, seed) = probe_setup(p)?;
    let base = load_trainer(baseline)?;
    let report = turn_importance(Scored::from(&tr), Scored::from(&base), &ds, seed)?;
    let summary = json!({
        "model": tr.config.train.model.as_str(),
        "baseline": base.config.train.model.as_str(),
        "report": report,
    });
    write_report(out_dir(&p.common)?, "turn_importance", Some(&report.to_csv()), &summary)
}

fn run_turn_order(p: &Probe) -> Result<()> {
    let (tr, ds, seed) = probe_setup(p)?;
    let report = turn_order(Scored::from(&tr), &ds, seed)?;
    let summary = json!({"model": tr.config.train.model.as_str(), "report": report});
    write_report(out_dir(&p.common)?, "turn_order", Some(&report.to_csv()), &summary)
}

fn run_memory_retention(p: &Probe) -> Result<()> {
    let (tr, ds, seed) = probe_setup(p)?;
    let report = memory_retention(Scored::from(&tr), &ds, seed)?;
    let gap2 = report.turn(2).map(|r| r.stateful - r.reset);
    let summary = json!({"model": tr.config.train.model.as_str(), "turn2_gap": gap2, "report": report});
    write_report(
        out_dir(&p.common)?,
        "memory_retention",
        Some(&report.to_csv()),
        &summary,
    )
}

#[allow(clippy::too_many_arguments)]
fn run_time(
    common: &Common,
    stages: &[usize],
    locations: usize,
    width: usize,
    runs: usize,
    checkpoint: &Option<PathBuf>,
    tolerance_ms: f64,
) -> Result<()> {
    let cfg = load_config(common)?;
    let [_, _, test] = datasets(&cfg)?;
    let configs: Vec<CascadeConfig> = stages
        .iter()
        .map(|&c| CascadeConfig {
            stages: c,
            locations,
            width,
            ..cfg.train.cascade.clone()
        })
        .collect();
    let mut rows = timing(&configs, &test.transactions, runs, cfg.train.seed)?;
    if let Some(p) = checkpoint {
        let tr = load_trainer(p)?;
        let c = &tr.config.train.cascade;
        let mean = tr.evaluate(&probe_data(&tr.config, &None)?)?.mean_r5_r8;
        for r in rows.iter_mut().filter(|r| {
            tr.config.train.model.is_cascade() && (r.stages, r.locations, r.width) == (c.stages, c.locations, c.width)
        }) {
            r.mean_r5_r8 = Some(mean);
        }
    }
    let monotone = timing_is_monotone(&rows, tolerance_ms);
    let summary = json!({
        "runs": runs,
        "tolerance_ms": tolerance_ms,
        "monotone_in_c": monotone,
        "rows": rows,
    });
    write_report(out_dir(common)?, "timing", Some(&timing_csv(&rows)), &summary)
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::GenData { common } => gen_data(&common),
        Cmd::Train {
            common,
            model,
            epochs,
            resume,
        } => train(&common, model, epochs, &resume),
        Cmd::Eval {
            common,
            checkpoint,
            model,
            data,
        } => eval(&common, &checkpoint, model, &data),
        Cmd::Gradcheck {
            common,
            stages,
            turns,
            batch,
            step,
            tolerance,
        } => {
            let shape = GradcheckShape {
                stages,
                turns,
                batch,
                ..GradcheckShape::default()
            };
            gradcheck(&common, shape, step, tolerance)
        }
        Cmd::AblateMemories { common, stages, epochs } => ablate(&common, &stages, epochs),
        Cmd::TurnImportance { probe, baseline } => run_turn_importance(&probe, &baseline),
        Cmd::TurnOrder { probe } => run_turn_order(&probe),
        Cmd::MemoryRetention { probe } => run_memory_retention(&probe),
        Cmd::Time {
            common,
            stages,
            locations,
            width,
            runs,
            checkpoint,
            tolerance_ms,
        } => run_time(&common, &stages, locations, width, runs, &checkpoint, tolerance_ms),
    }
}
