//! TOML experiment manifests.
//!
//! ```toml
//! [strategy]
//! kind = "wash"            # none | wash | wash_opt | papa | papa_all
//! p = 0.01                 # wash, wash_opt
//! schedule = "decreasing"  # decreasing | constant | increasing
//! alpha = 0.99             # papa
//! period = 10              # papa, papa_all (steps)
//! window_start_epoch = 0   # optional active window, in epochs
//! window_end_epoch = 30
//!
//! [net]
//! dims = [20, 64, 64, 4]
//!
//! [data]
//! kind = "synthetic"       # synthetic | file
//! seed = 100
//!
//! [train]
//! epochs = 30
//! batch = 32
//!
//! [run]
//! n_models = 4
//! ```
//!
//! Every other key has a default; see the section structs below and the
//! README for the full list.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wash_core::coordination::{Schedule, Strategy, StrategyConfig, StrategyKind};
use wash_core::evaluation::{EnsembleMode, EvalOptions, SoupKeep};
use wash_core::nn::{Activation, Dataset, NetSpec, SyntheticSpec};
use wash_core::optim::OptHyper;
use wash_core::population::{epoch_window_to_steps, DataSpec, InitMode, RunConfig};
use wash_core::rng::derive_u64;

use crate::error::{CliError, Result};
use crate::formats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    #[serde(default)]
    pub strategy: StrategySection,
    pub net: NetSection,
    #[serde(default)]
    pub data: DataSection,
    pub train: TrainSection,
    #[serde(default)]
    pub opt: OptSection,
    pub run: RunSection,
    #[serde(default)]
    pub telemetry: TelemetrySection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, skip_serializing_if = "SweepSection::is_empty")]
    pub sweep: SweepSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategySection {
    pub kind: StrategyKind,
    pub p: Option<f64>,
    #[serde(default)]
    pub schedule: Schedule,
    pub alpha: Option<f64>,
    pub period: Option<usize>,
    #[serde(default)]
    pub lr_coupled: bool,
    pub window_start_epoch: Option<usize>,
    pub window_end_epoch: Option<usize>,
}

impl Default for StrategySection {
    fn default() -> Self {
        Self {
            kind: StrategyKind::None,
            p: None,
            schedule: Schedule::default(),
            alpha: None,
            period: None,
            lr_coupled: false,
            window_start_epoch: None,
            window_end_epoch: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub dims: Vec<usize>,
    #[serde(default = "relu")]
    pub activation: Activation,
}

fn relu() -> Activation {
    Activation::Relu
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    /// Seed of the synthetic task.
    pub seed: u64,
    /// Dataset file, relative to the manifest.
    pub path: Option<String>,
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    pub spread: f64,
    pub modes_per_class: usize,
    /// Fraction of training examples held out for validation.
    pub val_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            kind: DataKind::Synthetic,
            seed: 0,
            path: None,
            classes: 4,
            dim: 20,
            n_per_class: 1000,
            n_test_per_class: 250,
            spread: 1.0,
            modes_per_class: 6,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch: usize,
    #[serde(default)]
    pub hetero: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptSection {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl Default for OptSection {
    fn default() -> Self {
        let h = OptHyper::default();
        Self {
            momentum: h.momentum,
            weight_decay: h.weight_decay,
            lr_max: h.lr_max,
            lr_min: h.lr_min,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    pub n_models: usize,
    #[serde(default)]
    pub init_seed: u64,
    #[serde(default)]
    pub data_seed: u64,
    #[serde(default)]
    pub shuffle_seed: u64,
    #[serde(default)]
    pub init: InitMode,
    /// Threads for the local steps; does not change results.
    #[serde(default = "one")]
    pub workers: usize,
    /// Output directory, relative to the manifest. Overridden by `--out`.
    pub output: Option<String>,
    /// Write every applied shuffle plan to `plans.txt`.
    #[serde(default)]
    pub dump_plans: bool,
    /// Write `checkpoint.bin` every this many epochs (0: never).
    #[serde(default)]
    pub checkpoint_every_epochs: usize,
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TelemetrySection {
    /// A metrics row every this many steps; the final step is always written.
    pub every: usize,
}

impl Default for TelemetrySection {
    fn default() -> Self {
        Self { every: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub ensemble: EnsembleMode,
    pub soup: SoupKeep,
    /// When set, `interp.csv` holds the pairwise grid at this λ.
    pub interp_lambda: Option<f64>,
}

/// Axes of a sweep; empty axes keep the base value.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub p: Vec<f64>,
    pub n_models: Vec<usize>,
    pub strategy: Vec<StrategyKind>,
    pub schedule: Vec<Schedule>,
    /// `[start_epoch, end_epoch]` pairs.
    pub window: Vec<[usize; 2]>,
    /// Repetitions of every axis combination.
    pub seeds: usize,
    /// Runs executed concurrently.
    pub jobs: usize,
}

impl SweepSection {
    pub fn is_empty(&self) -> bool {
        *self == Self::default()
    }
}

impl Manifest {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn strategy(&self) -> Result<Strategy> {
        let s = &self.strategy;
        let need = |v: Option<f64>, key: &str| {
            v.ok_or_else(|| CliError::Config(format!("strategy.{key} is required for {}", s.kind)))
        };
        let period = || {
            s.period.ok_or_else(|| {
                CliError::Config(format!("strategy.period is required for {}", s.kind))
            })
        };
        let strategy = match s.kind {
            StrategyKind::None => Strategy::None,
            StrategyKind::Wash => Strategy::Wash {
                p: need(s.p, "p")?,
                schedule: s.schedule,
            },
            StrategyKind::WashOpt => Strategy::WashOpt {
                p: need(s.p, "p")?,
                schedule: s.schedule,
            },
            StrategyKind::Papa => Strategy::Papa {
                alpha: need(s.alpha, "alpha")?,
                period: period()?,
                lr_coupled: s.lr_coupled,
            },
            StrategyKind::PapaAll => Strategy::PapaAll { period: period()? },
        };
        strategy
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(strategy)
    }

    fn data_spec(&self) -> Result<DataSpec> {
        let d = &self.data;
        Ok(match d.kind {
            DataKind::Synthetic => DataSpec::Synthetic(SyntheticSpec {
                seed: d.seed,
                classes: d.classes,
                dim: d.dim,
                n_per_class: d.n_per_class,
                n_test_per_class: d.n_test_per_class,
                spread: d.spread,
                modes_per_class: d.modes_per_class,
            }),
            DataKind::File => DataSpec::File {
                path: d.path.clone().ok_or_else(|| {
                    CliError::Config("data.path is required for file data".into())
                })?,
            },
        })
    }

    /// Builds the dataset and the step-level run configuration. File paths
    /// are resolved against `base_dir`.
    pub fn resolve(&self, base_dir: &Path) -> Result<(RunConfig, Dataset)> {
        let net = NetSpec::new(self.net.dims.clone(), self.net.activation)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let data_spec = self.data_spec()?;
        let mut cfg = RunConfig {
            net,
            data: data_spec.clone(),
            val_fraction: self.data.val_fraction,
            n_models: self.run.n_models,
            epochs: self.train.epochs,
            batch_size: self.train.batch,
            opt: OptHyper {
                momentum: self.opt.momentum,
                weight_decay: self.opt.weight_decay,
                lr_max: self.opt.lr_max,
                lr_min: self.opt.lr_min,
            },
            strategy: StrategyConfig::new(self.strategy()?),
            init_seed: self.run.init_seed,
            data_seed: self.run.data_seed,
            shuffle_seed: self.run.shuffle_seed,
            init_mode: self.run.init,
            hetero: self.train.hetero,
            telemetry_every: self.telemetry.every,
            eval: EvalOptions {
                ensemble: self.eval.ensemble,
                soup_keep: self.eval.soup,
            },
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let data = match &data_spec {
            DataSpec::Synthetic(_) => cfg.build_dataset()?,
            DataSpec::File { path } => {
                let loaded = formats::read_dataset(&base_dir.join(path))?;
                cfg.with_holdout(loaded)?
            }
        };
        let (ws, we) = (
            self.strategy.window_start_epoch,
            self.strategy.window_end_epoch,
        );
        if ws.is_some() || we.is_some() {
            let (start, end) = (ws.unwrap_or(0), we.unwrap_or(self.train.epochs));
            if start > end {
                return Err(CliError::Config(format!(
                    "window start epoch {start} after end {end}"
                )));
            }
            let (s, e) = epoch_window_to_steps(start, end, cfg.steps_per_epoch(data.train.len()));
            cfg.strategy = cfg.strategy.with_window(s, e);
        }
        Ok((cfg, data))
    }

    /// Output directory: `run.output` relative to `base_dir`, else `runs/default`.
    pub fn output_dir(&self, base_dir: &Path) -> PathBuf {
        base_dir.join(self.run.output.as_deref().unwrap_or("runs/default"))
    }

    /// Expands the sweep axes into named runs. Each run gets its own derived
    /// init, data-order and shuffle seeds; the synthetic task stays fixed.
    /// Derived seeds keep 63 bits because TOML integers are signed.
    /// Axes that do not apply to a strategy (p and schedule for non-shuffling
    /// strategies) are not expanded for it.
    pub fn expand_sweep(&self) -> Vec<SweepEntry> {
        let sw = &self.sweep;
        let or_base = |v: &[StrategyKind]| {
            if v.is_empty() {
                vec![self.strategy.kind]
            } else {
                v.to_vec()
            }
        };
        let windows: Vec<Option<[usize; 2]>> = if sw.window.is_empty() {
            vec![None]
        } else {
            sw.window.iter().copied().map(Some).collect()
        };
        let ns = if sw.n_models.is_empty() {
            vec![self.run.n_models]
        } else {
            sw.n_models.clone()
        };
        let mut out = Vec::new();
        for kind in or_base(&sw.strategy) {
            let shuffles = matches!(kind, StrategyKind::Wash | StrategyKind::WashOpt);
            let ps: Vec<Option<f64>> = if shuffles && !sw.p.is_empty() {
                sw.p.iter().copied().map(Some).collect()
            } else {
                vec![self.strategy.p]
            };
            let schedules = if shuffles && !sw.schedule.is_empty() {
                sw.schedule.clone()
            } else {
                vec![self.strategy.schedule]
            };
            for &p in &ps {
                for &schedule in &schedules {
                    for &n in &ns {
                        for &window in &windows {
                            for seed in 0..sw.seeds.max(1) {
                                let index = out.len();
                                let mut m = self.clone();
                                m.sweep = SweepSection::default();
                                m.strategy.kind = kind;
                                m.strategy.p = p;
                                m.strategy.schedule = schedule;
                                m.run.n_models = n;
                                if let Some([s, e]) = window {
                                    m.strategy.window_start_epoch = Some(s);
                                    m.strategy.window_end_epoch = Some(e);
                                }
                                let key = [index as u64];
                                m.run.init_seed = derive_u64(self.run.init_seed, &key) >> 1;
                                m.run.data_seed = derive_u64(self.run.data_seed, &key) >> 1;
                                m.run.shuffle_seed = derive_u64(self.run.shuffle_seed, &key) >> 1;
                                let mut name = format!("r{index:03}_{kind}");
                                if shuffles {
                                    name += &format!(
                                        "_p{}_{}",
                                        p.unwrap_or(0.0),
                                        schedule_str(schedule)
                                    );
                                }
                                name += &format!("_n{n}");
                                if let Some([s, e]) = window {
                                    name += &format!("_w{s}-{e}");
                                }
                                name += &format!("_s{seed}");
                                out.push(SweepEntry {
                                    name,
                                    seed,
                                    manifest: m,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub fn schedule_str(s: Schedule) -> &'static str {
    match s {
        Schedule::Decreasing => "decreasing",
        Schedule::Constant => "constant",
        Schedule::Increasing => "increasing",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepEntry {
    /// Unique directory name inside the sweep output.
    pub name: String,
    /// Repetition index.
    pub seed: usize,
    pub manifest: Manifest,
}
