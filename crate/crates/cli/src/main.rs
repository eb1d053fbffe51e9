//! `souf` command-line entry point.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error (missing key,
//! invalid value, empty grid), 3 non-finite loss during training.

mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use souf::checkpoint::Checkpoint;
use souf::config::{EvalSplit, RunConfig};
use souf::data::{export_split, generate_synthetic_shift};
use souf::engine::{adapt_target, pretrain_source};
use souf::eval::evaluate;
use souf::experiment::{
    ablation_csv, cached_source_checkpoint, metrics_ndjson, parse_grid, run_ablation, run_adaptation, run_sweep, sweep_csv,
    RunRecord, Toggles,
};
use souf::{Error, Split};

#[derive(Parser)]
#[command(name = "souf", version, about = "Source-free semi-supervised domain adaptation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (TOML with [data], [loss] and [train] sections).
    #[arg(long)]
    config: PathBuf,
    /// Overrides `[train].seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic split and export it under OUT/data as PNG files plus manifest.json.
    Generate(Common),
    /// Train encoder and classifier on the source split.
    Pretrain(Common),
    /// Adapt a source checkpoint to the target domain.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Enabled components, e.g. `pwc,rmc,pr` or `none`; defaults to the config weights.
        #[arg(long)]
        toggles: Option<String>,
        /// Source checkpoint; pretrained and cached under OUT/checkpoints when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Run all eight component subsets over several seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Number of consecutive seeds starting at the run seed.
        #[arg(long, default_value_t = 3)]
        repeats: u64,
    },
    /// Sweep one loss weight over a grid of values.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = ["lambda_pwc", "lambda_rmc", "lambda_pr"])]
        param: String,
        /// Comma-separated values, at least three.
        #[arg(long)]
        grid: String,
        #[arg(long, default_value_t = 1)]
        repeats: u64,
    },
    /// Report overall and per-class target accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to OUT/adapted.ckpt.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum)]
        split: Option<SplitArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Transductive,
    Holdout,
    Source,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::MissingKey { .. } | Error::Config(_)) => 2,
        Some(Error::NonFinite { .. }) => 3,
        _ => 1,
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Generate(c) => generate(&c),
        Command::Pretrain(c) => pretrain(&c),
        Command::Adapt { common, toggles, checkpoint } => adapt(&common, toggles.as_deref(), checkpoint.as_deref()),
        Command::Ablate { common, repeats } => ablate(&common, repeats),
        Command::Sweep { common, param, grid, repeats } => sweep(&common, &param, &grid, repeats),
        Command::Eval { common, checkpoint, split } => eval(&common, checkpoint.as_deref(), split),
    }
}

fn load(c: &Common) -> Result<(RunConfig, Split)> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(seed) = c.seed {
        cfg.train.seed = seed;
    }
    fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let split = generate_synthetic_shift(&cfg.data)?;
    Ok((cfg, split))
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn write_manifest(out: &Path, command: &str, cfg: &RunConfig, extra: serde_json::Value) -> Result<()> {
    let mut m = json!({
        "command": command,
        "config_hash": cfg.hash(),
        "seed": cfg.train.seed,
        "config": cfg,
    });
    if let (Some(obj), serde_json::Value::Object(more)) = (m.as_object_mut(), extra) {
        obj.extend(more);
    }
    write(&out.join("manifest.json"), serde_json::to_string_pretty(&m)? + "\n")
}

fn generate(c: &Common) -> Result<()> {
    let (cfg, split) = load(c)?;
    let data_dir = c.out.join("data");
    export_split(&split, &data_dir)?;
    write(&c.out.join("config.toml"), cfg.to_toml_string()?)?;
    write_manifest(&c.out, "generate", &cfg, json!({ "artifacts": ["data/manifest.json", "config.toml"] }))?;
    println!(
        "wrote {} source, {} labelled target, {} unlabelled target and {} holdout images to {}",
        split.source.len(),
        split.target_labeled.len(),
        split.target_unlabeled.len(),
        split.target_holdout.len(),
        data_dir.display()
    );
    Ok(())
}

fn pretrain(c: &Common) -> Result<()> {
    let (cfg, split) = load(c)?;
    let outcome = pretrain_source(&split, &cfg)?;
    let path = c.out.join("source.ckpt");
    outcome.checkpoint.save(&path)?;
    write_manifest(
        &c.out,
        "pretrain",
        &cfg,
        json!({ "source_val_acc": outcome.source_val_acc, "train_loss": outcome.train_loss, "artifacts": ["source.ckpt"] }),
    )?;
    println!("source validation accuracy {:.4}; checkpoint {}", outcome.source_val_acc, path.display());
    Ok(())
}

fn source_checkpoint(c: &Common, cfg: &RunConfig, split: &Split, explicit: Option<&Path>) -> Result<Checkpoint<f32>> {
    match explicit {
        Some(p) => Ok(Checkpoint::load(p)?),
        None => Ok(cached_source_checkpoint(split, cfg, &c.out.join("checkpoints"))?),
    }
}

fn adapt(c: &Common, toggles: Option<&str>, checkpoint: Option<&Path>) -> Result<()> {
    let (mut cfg, split) = load(c)?;
    let source = source_checkpoint(c, &cfg, &split, checkpoint)?;
    let label = match toggles {
        Some(t) => {
            let t = Toggles::parse(t)?;
            cfg = t.apply(&cfg);
            t.to_string()
        }
        None => "config".to_string(),
    };
    let start = std::time::Instant::now();
    let outcome = adapt_target(&split, &source, &cfg, |m| {
        eprintln!(
            "epoch {:>3}  base {:.4}  pwc {:.4}  rmc {:.4}  pr {:.4}  all {:.4}  acc {:.4}",
            m.epoch, m.loss_base, m.loss_pwc, m.loss_rmc, m.loss_pr, m.loss_all, m.target_acc
        )
    })?;
    let record = RunRecord::from_outcome(&cfg, &label, &outcome, start.elapsed().as_secs_f64());
    write(&c.out.join("metrics.ndjson"), metrics_ndjson(&outcome.metrics))?;
    Checkpoint::from_model(&outcome.model, source.source_val_acc).save(&c.out.join("adapted.ckpt"))?;
    write_manifest(
        &c.out,
        "adapt",
        &cfg,
        json!({
            "toggles": label,
            "source_only_acc": record.source_only_acc,
            "final_target_acc": record.final_target_acc,
            "wall_clock_secs": record.wall_clock_secs,
            "classifier_digest": outcome.classifier_digest_after,
            "artifacts": ["metrics.ndjson", "adapted.ckpt"],
        }),
    )?;
    println!("target accuracy {:.4} -> {:.4}", record.source_only_acc, record.final_target_acc);
    Ok(())
}

fn seeds(cfg: &RunConfig, repeats: u64) -> Vec<u64> {
    (0..repeats.max(1)).map(|k| cfg.train.seed + k).collect()
}

fn ablate(c: &Common, repeats: u64) -> Result<()> {
    let (cfg, split) = load(c)?;
    let seeds = seeds(&cfg, repeats);
    let ckpt_dir = c.out.join("checkpoints");
    let (rows, records) = run_ablation(&cfg, &seeds, |run_cfg, toggles| {
        let source = cached_source_checkpoint(&split, run_cfg, &ckpt_dir)?;
        let (rec, _) = run_adaptation(&split, &source, run_cfg, &toggles.to_string())?;
        eprintln!("{:<12} seed {}  acc {:.4}", rec.toggles, rec.seed, rec.final_target_acc);
        Ok(rec)
    })?;
    write(&c.out.join("ablation.csv"), ablation_csv(&rows)?)?;
    write(&c.out.join("records.json"), serde_json::to_string_pretty(&records)? + "\n")?;
    write_manifest(&c.out, "ablate", &cfg, json!({ "seeds": seeds, "artifacts": ["ablation.csv", "records.json"] }))?;
    for r in &rows {
        match &r.failure {
            None => println!("{:<12} {:.4} ± {:.4}", r.label, r.mean, r.std),
            Some(f) => println!("{:<12} failed ({f})", r.label),
        }
    }
    Ok(())
}

fn sweep(c: &Common, param: &str, grid: &str, repeats: u64) -> Result<()> {
    let grid = parse_grid(grid)?;
    let (cfg, split) = load(c)?;
    let seeds = seeds(&cfg, repeats);
    let ckpt_dir = c.out.join("checkpoints");
    let (rows, records) = run_sweep(&cfg, param, &grid, &seeds, |run_cfg| {
        let source = cached_source_checkpoint(&split, run_cfg, &ckpt_dir)?;
        let (rec, _) = run_adaptation(&split, &source, run_cfg, "config")?;
        eprintln!("{param}={}  seed {}  acc {:.4}", grid_value(run_cfg, param), rec.seed, rec.final_target_acc);
        Ok(rec)
    })?;
    write(&c.out.join("sweep.csv"), sweep_csv(&rows)?)?;
    write(&c.out.join("records.json"), serde_json::to_string_pretty(&records)? + "\n")?;
    plot::sweep_png(&rows, &c.out.join("sweep.png"))?;
    write_manifest(&c.out, "sweep", &cfg, json!({ "param": param, "grid": grid, "seeds": seeds, "artifacts": ["sweep.csv", "sweep.png", "records.json"] }))?;
    for r in &rows {
        println!("{param}={:<8} {:.4} ± {:.4}", r.value, r.mean, r.std);
    }
    Ok(())
}

fn grid_value(cfg: &RunConfig, param: &str) -> f64 {
    match param {
        "lambda_pwc" => cfg.loss.lambda_pwc,
        "lambda_rmc" => cfg.loss.lambda_rmc,
        _ => cfg.loss.lambda_pr,
    }
}

fn eval(c: &Common, checkpoint: Option<&Path>, split_arg: Option<SplitArg>) -> Result<()> {
    let (cfg, split) = load(c)?;
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| c.out.join("adapted.ckpt"));
    let model = Checkpoint::<f32>::load(&path)?.to_model()?;
    let which = split_arg.unwrap_or(match cfg.train.eval_split {
        EvalSplit::Transductive => SplitArg::Transductive,
        EvalSplit::Holdout => SplitArg::Holdout,
    });
    let (name, samples, truth) = match which {
        SplitArg::Transductive => ("target_unlabeled", &split.target_unlabeled, split.unlabeled_truth.clone()),
        SplitArg::Holdout => {
            if split.target_holdout.is_empty() {
                return Err(Error::Config("holdout evaluation requested but n_holdout is 0".into()).into());
            }
            ("target_holdout", &split.target_holdout, split.target_holdout.iter().filter_map(|s| s.label).collect())
        }
        SplitArg::Source => ("source", &split.source, split.source.iter().filter_map(|s| s.label).collect()),
    };
    let report = evaluate(&model, samples, &truth, 100)?;
    print!("{name}\n{}", report.render());
    write(
        &c.out.join("eval.json"),
        serde_json::to_string_pretty(&json!({ "checkpoint": path, "split": name, "report": report }))? + "\n",
    )?;
    Ok(())
}
