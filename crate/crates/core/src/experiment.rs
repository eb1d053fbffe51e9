//! Run records, ablation grids and loss-weight sweeps.

use std::fmt;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::DatasetSplit;
use crate::engine::{adapt_target, pretrain_source, AdaptOutcome, EpochMetrics};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Which of the three auxiliary objectives are switched on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Toggles {
    pub pwc: bool,
    pub rmc: bool,
    pub pr: bool,
}

impl Toggles {
    pub const NONE: Self = Self { pwc: false, rmc: false, pr: false };
    pub const ALL: Self = Self { pwc: true, rmc: true, pr: true };

    /// The eight subsets: none, singles, pairs, all.
    pub fn all_subsets() -> [Self; 8] {
        let t = |pwc, rmc, pr| Self { pwc, rmc, pr };
        [
            t(false, false, false),
            t(true, false, false),
            t(false, true, false),
            t(false, false, true),
            t(true, true, false),
            t(true, false, true),
            t(false, true, true),
            t(true, true, true),
        ]
    }

    /// Parses a comma-separated list such as `pwc,pr`; `none` or an empty string selects nothing.
    pub fn parse(s: &str) -> Result<Self> {
        let mut t = Self::NONE;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "pwc" => t.pwc = true,
                "rmc" => t.rmc = true,
                "pr" => t.pr = true,
                "none" => {}
                "all" => t = Self::ALL,
                other => return Err(Error::Config(format!("unknown toggle `{other}` (expected pwc, rmc, pr)"))),
            }
        }
        Ok(t)
    }

    /// Copy of `config` with the weights of disabled components set to zero.
    pub fn apply(&self, config: &RunConfig) -> RunConfig {
        let mut c = config.clone();
        if !self.pwc {
            c.loss.lambda_pwc = 0.0;
        }
        if !self.rmc {
            c.loss.lambda_rmc = 0.0;
        }
        if !self.pr {
            c.loss.lambda_pr = 0.0;
        }
        c
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let on: Vec<&str> = [(self.pwc, "pwc"), (self.rmc, "rmc"), (self.pr, "pr")]
            .iter()
            .filter(|(b, _)| *b)
            .map(|(_, n)| *n)
            .collect();
        if on.is_empty() {
            f.write_str("none")
        } else {
            f.write_str(&on.join("+"))
        }
    }
}

/// Outcome of one adaptation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config_hash: String,
    pub seed: u64,
    pub toggles: String,
    pub metrics: Vec<EpochMetrics>,
    pub source_only_acc: f64,
    pub final_target_acc: f64,
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn from_outcome<T: Scalar>(config: &RunConfig, toggles: &str, outcome: &AdaptOutcome<T>, secs: f64) -> Self {
        Self {
            config_hash: config.hash(),
            seed: config.train.seed,
            toggles: toggles.to_string(),
            metrics: outcome.metrics.clone(),
            source_only_acc: outcome.initial_target_acc,
            final_target_acc: outcome.final_target_acc(),
            wall_clock_secs: secs,
        }
    }
}

/// Newline-delimited JSON, one record per epoch.
pub fn metrics_ndjson(metrics: &[EpochMetrics]) -> String {
    metrics.iter().map(|m| serde_json::to_string(m).expect("metrics serialize") + "\n").collect()
}

/// Adapts `source` with `config` and records the run.
pub fn run_adaptation<T: Scalar>(
    split: &DatasetSplit<T>,
    source: &Checkpoint<T>,
    config: &RunConfig,
    toggles: &str,
) -> Result<(RunRecord, AdaptOutcome<T>)> {
    let start = Instant::now();
    let outcome = adapt_target(split, source, config, |_| {})?;
    let record = RunRecord::from_outcome(config, toggles, &outcome, start.elapsed().as_secs_f64());
    Ok((record, outcome))
}

/// Loads the cached source checkpoint for `config` from `dir`, pretraining and saving it on a miss.
///
/// The file name carries the config hash, so a changed configuration never
/// reuses a stale model.
pub fn cached_source_checkpoint<T: Scalar>(split: &DatasetSplit<T>, config: &RunConfig, dir: &Path) -> Result<Checkpoint<T>> {
    let mut key = config.clone();
    key.loss = Default::default();
    let path = dir.join(format!("source_{}_seed{}.ckpt", &key.hash()[..12], config.train.seed));
    if path.exists() {
        return Checkpoint::load(&path);
    }
    std::fs::create_dir_all(dir)?;
    let outcome = pretrain_source(split, config)?;
    outcome.checkpoint.save(&path)?;
    Ok(outcome.checkpoint)
}

/// Mean and sample standard deviation; the deviation of a single value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub toggles: Toggles,
    pub label: String,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// First error message if any run of the row failed.
    pub failure: Option<String>,
}

/// Runs every toggle subset for every seed; a failing run marks its row without stopping the grid.
pub fn run_ablation(
    base: &RunConfig,
    seeds: &[u64],
    mut run: impl FnMut(&RunConfig, Toggles) -> Result<RunRecord>,
) -> Result<(Vec<AblationRow>, Vec<RunRecord>)> {
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(8);
    let mut records = Vec::new();
    for toggles in Toggles::all_subsets() {
        let mut accuracies = Vec::new();
        let mut failure = None;
        for &seed in seeds {
            let mut cfg = toggles.apply(base);
            cfg.train.seed = seed;
            match run(&cfg, toggles) {
                Ok(rec) => {
                    accuracies.push(rec.final_target_acc);
                    records.push(rec);
                }
                Err(e) => {
                    failure.get_or_insert_with(|| format!("seed {seed}: {e}"));
                }
            }
        }
        let (mean, std) = if failure.is_some() { (f64::NAN, f64::NAN) } else { mean_std(&accuracies) };
        rows.push(AblationRow { toggles, label: toggles.to_string(), seeds: seeds.to_vec(), accuracies, mean, std, failure });
    }
    Ok((rows, records))
}

pub const SWEEP_PARAMS: [&str; 3] = ["lambda_pwc", "lambda_rmc", "lambda_pr"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    pub failure: Option<String>,
}

/// Parses `v1,v2,...` into a sweep grid.
pub fn parse_grid(s: &str) -> Result<Vec<f64>> {
    let grid = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| p.parse::<f64>().map_err(|_| Error::Config(format!("grid value `{p}` is not a number"))))
        .collect::<Result<Vec<_>>>()?;
    check_grid(&grid)?;
    Ok(grid)
}

fn check_grid(grid: &[f64]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::Config("sweep grid is empty".into()));
    }
    if grid.len() < 3 {
        return Err(Error::Config(format!("sweep grid needs at least 3 values, got {}", grid.len())));
    }
    if let Some(v) = grid.iter().find(|v| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::Config(format!("sweep value {v} must be a non-negative number")));
    }
    Ok(())
}

pub fn set_param(config: &mut RunConfig, param: &str, value: f64) -> Result<()> {
    match param {
        "lambda_pwc" => config.loss.lambda_pwc = value,
        "lambda_rmc" => config.loss.lambda_rmc = value,
        "lambda_pr" => config.loss.lambda_pr = value,
        other => return Err(Error::Config(format!("cannot sweep `{other}` (expected one of {})", SWEEP_PARAMS.join(", ")))),
    }
    Ok(())
}

/// Accuracy for each grid value of one loss weight, averaged over seeds.
pub fn run_sweep(
    base: &RunConfig,
    param: &str,
    grid: &[f64],
    seeds: &[u64],
    mut run: impl FnMut(&RunConfig) -> Result<RunRecord>,
) -> Result<(Vec<SweepRow>, Vec<RunRecord>)> {
    check_grid(grid)?;
    set_param(&mut base.clone(), param, 0.0)?;
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(grid.len());
    let mut records = Vec::new();
    for &value in grid {
        let mut accuracies = Vec::new();
        let mut failure = None;
        for &seed in seeds {
            let mut cfg = base.clone();
            set_param(&mut cfg, param, value)?;
            cfg.train.seed = seed;
            match run(&cfg) {
                Ok(rec) => {
                    accuracies.push(rec.final_target_acc);
                    records.push(rec);
                }
                Err(e) => {
                    failure.get_or_insert_with(|| format!("seed {seed}: {e}"));
                }
            }
        }
        let (mean, std) = if failure.is_some() { (f64::NAN, f64::NAN) } else { mean_std(&accuracies) };
        rows.push(SweepRow { param: param.to_string(), value, seeds: seeds.to_vec(), accuracies, mean, std, failure });
    }
    Ok((rows, records))
}

fn fmt_acc(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "failed".into()
    }
}

fn join_accs(accs: &[f64]) -> String {
    accs.iter().map(|a| format!("{a:.4}")).collect::<Vec<_>>().join(";")
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub fn ablation_csv(rows: &[AblationRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["toggles", "pwc", "rmc", "pr", "mean_acc", "std_acc", "accuracies", "status"]).map_err(csv_error)?;
    for r in rows {
        let status = r.failure.clone().map_or_else(|| "ok".to_string(), |f| format!("failed: {f}"));
        w.write_record([
            r.label.clone(),
            (r.toggles.pwc as u8).to_string(),
            (r.toggles.rmc as u8).to_string(),
            (r.toggles.pr as u8).to_string(),
            fmt_acc(r.mean),
            fmt_acc(r.std),
            join_accs(&r.accuracies),
            status,
        ])
        .map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

pub fn sweep_csv(rows: &[SweepRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["param", "value", "mean_acc", "std_acc", "accuracies", "status"]).map_err(csv_error)?;
    for r in rows {
        let status = r.failure.clone().map_or_else(|| "ok".to_string(), |f| format!("failed: {f}"));
        w.write_record([r.param.clone(), r.value.to_string(), fmt_acc(r.mean), fmt_acc(r.std), join_accs(&r.accuracies), status])
            .map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
