//! Subcommand implementations, callable without the argument parser.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wash_core::coordination::{expected_comm_fraction, CommLedger, Strategy};
use wash_core::evaluation::{interpolation_grid, EvalSummary};
use wash_core::nn::{make_synthetic, Dataset, SyntheticSpec};
use wash_core::population::{Checkpoint, RunConfig, RunResult, Trainer};
use wash_core::toy2d::{run_toy, Endpoint, ToyConfig};

use crate::config::{DataKind, Manifest};
use crate::error::{CliError, Result};
use crate::exec::Threaded;
use crate::formats::{self, fmt_f64};

pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const EVAL_FILE: &str = "eval.json";
pub const LEDGER_FILE: &str = "ledger.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const PLANS_FILE: &str = "plans.txt";
pub const INTERP_FILE: &str = "interp.csv";

/// Contents of `ledger.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub strategy: Strategy,
    pub total_steps: usize,
    #[serde(flatten)]
    pub ledger: CommLedger,
    /// Nominal scalars sent per model.
    pub per_model: f64,
    /// Nominal volume in units of one `N·d` exchange.
    pub allreduce_equivalent: f64,
    /// Expected scalars per model per active step, as a fraction of `d`.
    pub expected_fraction_per_step: f64,
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

/// Makes a relative dataset path absolute so the run directory is
/// self-contained.
fn anchor_data_path(m: &mut Manifest, base_dir: &Path) -> Result<()> {
    if m.data.kind == DataKind::File {
        if let Some(p) = &m.data.path {
            let joined = base_dir.join(p);
            let abs = joined
                .canonicalize()
                .map_err(|e| CliError::io(&joined, e))?;
            m.data.path = Some(abs.to_string_lossy().into_owned());
        }
    }
    Ok(())
}

/// Trains one manifest into `out_dir` and writes its artifacts.
pub fn train(
    manifest: &Manifest,
    base_dir: &Path,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<RunResult> {
    let mut m = manifest.clone();
    anchor_data_path(&mut m, base_dir)?;
    let (cfg, data) = m.resolve(base_dir)?;
    mkdir(out_dir)?;
    formats::write_text(&out_dir.join(CONFIG_FILE), &m.to_toml())?;
    let trainer = Trainer::new(cfg, &data)?;
    drive(trainer, &data, &m, out_dir, workers)
}

/// Continues the run in `run_dir` from its `checkpoint.bin`.
pub fn resume(run_dir: &Path, workers: Option<usize>) -> Result<RunResult> {
    let m = Manifest::load(&run_dir.join(CONFIG_FILE))?;
    let (cfg, data) = m.resolve(run_dir)?;
    let ckpt = formats::read_checkpoint(&run_dir.join(CHECKPOINT_FILE))?;
    let trainer = Trainer::from_checkpoint(cfg, &data, &ckpt)?;
    drive(trainer, &data, &m, run_dir, workers)
}

fn drive(
    mut trainer: Trainer<'_>,
    data: &Dataset,
    m: &Manifest,
    out_dir: &Path,
    workers: Option<usize>,
) -> Result<RunResult> {
    let exec = Threaded::new(workers.unwrap_or(m.run.workers));
    let plans_path = out_dir.join(PLANS_FILE);
    let mut plans = if m.run.dump_plans {
        let resuming = trainer.step_index() > 0;
        let file = fs::OpenOptions::new()
            .create(true)
            .append(resuming)
            .write(true)
            .truncate(!resuming)
            .open(&plans_path)
            .map_err(|e| CliError::io(&plans_path, e))?;
        let mut w = std::io::BufWriter::new(file);
        if !resuming {
            writeln!(w, "{}", formats::PLAN_HEADER).map_err(|e| CliError::io(&plans_path, e))?;
        }
        Some(w)
    } else {
        None
    };
    let ckpt_every = m.run.checkpoint_every_epochs * trainer.steps_per_epoch();
    while !trainer.is_done() {
        trainer.step(&exec)?;
        if let (Some(w), Some(plan)) = (plans.as_mut(), trainer.last_plan()) {
            formats::write_plan(w, plan).map_err(|e| CliError::io(&plans_path, e))?;
        }
        if ckpt_every > 0 && trainer.step_index().is_multiple_of(ckpt_every) {
            write_checkpoint(out_dir, &trainer.checkpoint())?;
        }
    }
    if let Some(mut w) = plans {
        w.flush().map_err(|e| CliError::io(&plans_path, e))?;
    }
    let cfg: RunConfig = trainer.config().clone();
    let total_steps = trainer.total_steps();
    let result = trainer.finish()?;
    write_artifacts(&cfg, data, m, total_steps, &result, out_dir)?;
    Ok(result)
}

fn write_checkpoint(out_dir: &Path, c: &Checkpoint) -> Result<()> {
    formats::write_checkpoint(&out_dir.join(CHECKPOINT_FILE), c)
}

fn write_artifacts(
    cfg: &RunConfig,
    data: &Dataset,
    m: &Manifest,
    total_steps: usize,
    r: &RunResult,
    out_dir: &Path,
) -> Result<()> {
    formats::write_text(
        &out_dir.join(METRICS_FILE),
        &formats::metrics_csv(&r.metrics),
    )?;
    if let Some(e) = &r.eval {
        formats::write_text(&out_dir.join(EVAL_FILE), &json(e))?;
    }
    let strategy = cfg.strategy.strategy;
    let reference = match strategy {
        Strategy::Papa { period, .. } | Strategy::PapaAll { period } => period,
        _ => 1,
    };
    let ledger = LedgerReport {
        strategy,
        total_steps,
        ledger: r.ledger,
        per_model: r.ledger.per_model(),
        allreduce_equivalent: r.ledger.allreduce_equivalent(),
        expected_fraction_per_step: expected_comm_fraction(&strategy, reference)?.fraction_per_step,
    };
    formats::write_text(&out_dir.join(LEDGER_FILE), &json(&ledger))?;
    if let Some(lambda) = m.eval.interp_lambda {
        let grid = interpolation_grid(r.models(), &cfg.net, lambda, &data.test)?;
        formats::write_text(&out_dir.join(INTERP_FILE), &formats::grid_csv(&grid))?;
    }
    Ok(())
}

pub const SWEEP_HEADER: &str = "run,strategy,p,schedule,n_models,window_start_epoch,window_end_epoch,seed,\
ensemble_acc,averaged_acc,greedy_soup_acc,best_model_acc,worst_model_acc,final_avg_consensus_dist,comm_scalars_cum";

/// Runs every sweep entry into `out_dir/<entry>` and writes `sweep.csv`.
pub fn sweep(manifest: &Manifest, base_dir: &Path, out_dir: &Path) -> Result<String> {
    let entries = manifest.expand_sweep();
    mkdir(out_dir)?;
    let jobs = manifest.sweep.jobs.max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let rows: Vec<String> = pool.install(|| {
        entries
            .par_iter()
            .map(|e| {
                let r = train(&e.manifest, base_dir, &out_dir.join(&e.name), None)?;
                let s = &e.manifest.strategy;
                let ev = r.eval.as_ref();
                let acc = |f: fn(&EvalSummary) -> f64| ev.map(f).map(fmt_f64).unwrap_or_default();
                Ok(format!(
                    "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    e.name,
                    s.kind,
                    s.p.map(fmt_f64).unwrap_or_default(),
                    crate::config::schedule_str(s.schedule),
                    e.manifest.run.n_models,
                    s.window_start_epoch
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                    s.window_end_epoch
                        .map(|v| v.to_string())
                        .unwrap_or_default(),
                    e.seed,
                    acc(|v| v.ensemble_acc),
                    acc(|v| v.averaged_acc),
                    ev.and_then(|v| v.greedy_soup.as_ref())
                        .map(|g| fmt_f64(g.test_acc))
                        .unwrap_or_default(),
                    acc(|v| v.best_model_acc),
                    acc(|v| v.worst_model_acc),
                    r.metrics
                        .last()
                        .map(|m| fmt_f64(m.avg_consensus_dist))
                        .unwrap_or_default(),
                    r.ledger.scalars_nominal,
                ))
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = String::from(SWEEP_HEADER);
    csv.push('\n');
    for r in rows {
        csv += &r;
        csv.push('\n');
    }
    formats::write_text(&out_dir.join("sweep.csv"), &csv)?;
    Ok(csv)
}

/// One line of a comparison report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub run: String,
    pub strategy: String,
    /// Expected per-step volume relative to EMA averaging every `papa_period` steps.
    pub comm_ratio: f64,
    pub ensemble_acc: Option<f64>,
    pub averaged_acc: Option<f64>,
    pub greedy_soup_acc: Option<f64>,
}

pub fn report_rows(run_dirs: &[PathBuf], papa_period: usize) -> Result<Vec<ReportRow>> {
    run_dirs
        .iter()
        .map(|dir| {
            let m = Manifest::load(&dir.join(CONFIG_FILE))?;
            let strategy = m.strategy()?;
            let eval_path = dir.join(EVAL_FILE);
            let eval: Option<EvalSummary> = if eval_path.exists() {
                let text = formats::read_text(&eval_path)?;
                Some(
                    serde_json::from_str(&text)
                        .map_err(|e| CliError::format(&eval_path, e.to_string()))?,
                )
            } else {
                None
            };
            Ok(ReportRow {
                run: dir
                    .file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default(),
                strategy: strategy.kind().to_string(),
                comm_ratio: expected_comm_fraction(&strategy, papa_period)?.ratio_vs_papa,
                ensemble_acc: eval.as_ref().map(|e| e.ensemble_acc),
                averaged_acc: eval.as_ref().map(|e| e.averaged_acc),
                greedy_soup_acc: eval
                    .as_ref()
                    .and_then(|e| e.greedy_soup.as_ref())
                    .map(|g| g.test_acc),
            })
        })
        .collect()
}

pub const REPORT_HEADER: &str = "run,strategy,comm_ratio,ensemble_acc,averaged_acc,greedy_soup_acc";

pub fn report_csv(rows: &[ReportRow]) -> String {
    let opt = |v: Option<f64>| v.map(fmt_f64).unwrap_or_default();
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        out += &format!(
            "{},{},{},{},{},{}\n",
            r.run,
            r.strategy,
            fmt_f64(r.comm_ratio),
            opt(r.ensemble_acc),
            opt(r.averaged_acc),
            opt(r.greedy_soup_acc)
        );
    }
    out
}

pub fn report_text(rows: &[ReportRow]) -> String {
    let pct = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |a| format!("{:.2}", 100.0 * a));
    let width = rows.iter().map(|r| r.run.len()).max().unwrap_or(3).max(3);
    let mut out = format!(
        "{:width$}  {:9}  {:>10}  {:>8}  {:>8}  {:>11}\n",
        "run", "strategy", "comm", "ensemble", "averaged", "greedy_soup"
    );
    for r in rows {
        out += &format!(
            "{:width$}  {:9}  {:>10.6}  {:>8}  {:>8}  {:>11}\n",
            r.run,
            r.strategy,
            r.comm_ratio,
            pct(r.ensemble_acc),
            pct(r.averaged_acc),
            pct(r.greedy_soup_acc)
        );
    }
    out
}

/// Runs the toy problem, writes the trajectory CSV and returns the endpoints.
pub fn toy2d(cfg: &ToyConfig, out: &Path) -> Result<[Endpoint; 2]> {
    let t = run_toy(cfg)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        mkdir(parent)?;
    }
    formats::write_text(out, &formats::trajectory_csv(&t))?;
    Ok(t.classify())
}

pub fn gen_data(spec: &SyntheticSpec, out: &Path) -> Result<()> {
    formats::write_dataset(out, &make_synthetic(spec)?)
}
