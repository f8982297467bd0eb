//! Lockstep population training: every model takes one local SGD step, then
//! the population is coordinated at a barrier.
//!
//! All randomness is keyed by `(seed, purpose, step/model/epoch...)`, so a run
//! is a pure function of its [`RunConfig`]. Worker count changes only who
//! computes each local step, and a [`Checkpoint`] taken at any step resumes
//! bit for bit.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt::Write;

use serde::{Deserialize, Serialize};

use crate::coordination::{
    apply_shuffle, papa_all_step, papa_ema_step, CommLedger, PlanSampler, ShufflePlan, Strategy,
    StrategyConfig,
};
use crate::error::{invalid, shape, Error, Result};
use crate::evaluation::{evaluate, telemetry_hook, EvalOptions, EvalSummary, MetricsRecord};
use crate::nn::{
    init_with_layout, loss_and_grad, make_heterogeneous_stream, make_synthetic, steps_per_epoch,
    Batch, Dataset, NetSpec, SyntheticSpec,
};
use crate::optim::{cosine_lr, sgd_step, OptHyper, OptState};
use crate::params::{LayeredParams, Layout};
use crate::rng::derive_u64;

/// Where the training data comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Synthetic(SyntheticSpec),
    /// A dataset file, read by the `wash` crate.
    File {
        path: String,
    },
}

/// How initial parameters are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Every model starts from the same `θ_0`.
    #[default]
    Shared,
    /// Model `n` uses a seed derived from `(init_seed, n)`.
    PerModel,
}

/// Everything a run depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub net: NetSpec,
    pub data: DataSpec,
    /// Fraction of the training split held out for validation; 0 keeps all.
    pub val_fraction: f64,
    pub n_models: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub opt: OptHyper,
    /// Coordination; the window is in steps.
    pub strategy: StrategyConfig,
    pub init_seed: u64,
    /// Batch order, jitter, the heterogeneity assignment and the holdout.
    pub data_seed: u64,
    pub shuffle_seed: u64,
    pub init_mode: InitMode,
    pub hetero: bool,
    /// A telemetry row every this many steps (0: final step only).
    pub telemetry_every: usize,
    pub eval: EvalOptions,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.opt.validate()?;
        self.strategy.validate()?;
        if self.n_models == 0 || self.batch_size == 0 {
            return Err(invalid("need at least one model and a positive batch size"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(invalid("validation fraction must lie in [0, 1)"));
        }
        if let DataSpec::Synthetic(s) = &self.data {
            if s.dim != self.net.input_dim() || s.classes != self.net.classes() {
                return Err(shape(
                    "network input/output sizes differ from the synthetic task",
                ));
            }
        }
        Ok(())
    }

    /// FNV-1a hash of the configuration's debug rendering. Stored in
    /// checkpoints so that resume refuses a different configuration.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv(0xcbf2_9ce4_8422_2325);
        let _ = write!(h, "{self:?}");
        h.0
    }

    /// Steps in one epoch of `n_train` examples.
    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        steps_per_epoch(n_train, self.batch_size)
    }

    pub fn total_steps(&self, n_train: usize) -> usize {
        self.epochs * self.steps_per_epoch(n_train)
    }

    /// Builds the dataset for synthetic configs, with the validation holdout.
    pub fn build_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSpec::Synthetic(s) => self.with_holdout(make_synthetic(s)?),
            DataSpec::File { path } => Err(invalid(format!(
                "dataset file {path} must be loaded by the caller"
            ))),
        }
    }

    /// Applies the configured validation holdout to a loaded dataset.
    pub fn with_holdout(&self, data: Dataset) -> Result<Dataset> {
        if self.val_fraction > 0.0 {
            data.with_validation_holdout(self.val_fraction, self.data_seed)
        } else {
            Ok(data)
        }
    }
}

struct Fnv(u64);

impl Write for Fnv {
    fn write_str(&mut self, s: &str) -> core::fmt::Result {
        for b in s.bytes() {
            self.0 = (self.0 ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        Ok(())
    }
}

/// Converts an epoch window to steps: epoch `e` starts at step `e · steps_per_epoch`.
pub fn epoch_window_to_steps(
    start_epoch: usize,
    end_epoch: usize,
    steps_per_epoch: usize,
) -> (usize, usize) {
    (start_epoch * steps_per_epoch, end_epoch * steps_per_epoch)
}

/// Runs one closure per worker item. Implementations may run items
/// concurrently; each item is owned by exactly one call.
pub trait Executor {
    fn for_each_worker<T: Send, F: Fn(usize, &mut T) + Sync>(&self, items: &mut [T], f: F);
}

/// Runs workers one after another on the calling thread.
#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl Executor for Sequential {
    fn for_each_worker<T: Send, F: Fn(usize, &mut T) + Sync>(&self, items: &mut [T], f: F) {
        for (i, item) in items.iter_mut().enumerate() {
            f(i, item);
        }
    }
}

/// Models and their momentum buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationState {
    pub models: Vec<LayeredParams>,
    pub opt: Vec<OptState>,
    /// Steps completed.
    pub step: usize,
}

/// Snapshot after `step` completed steps.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: u64,
    pub step: usize,
    pub params: Vec<Vec<f64>>,
    pub momentum: Vec<Vec<f64>>,
    pub ledger: CommLedger,
    pub metrics: Vec<MetricsRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub state: PopulationState,
    pub metrics: Vec<MetricsRecord>,
    pub ledger: CommLedger,
    /// `None` when the dataset has no test examples.
    pub eval: Option<EvalSummary>,
}

impl RunResult {
    pub fn models(&self) -> &[LayeredParams] {
        &self.state.models
    }
}

struct Job<'a> {
    params: &'a mut LayeredParams,
    opt: &'a mut OptState,
    loss: Result<f64>,
}

/// Step-by-step driver of one run.
pub struct Trainer<'d> {
    cfg: RunConfig,
    data: &'d Dataset,
    state: PopulationState,
    ledger: CommLedger,
    metrics: Vec<MetricsRecord>,
    sampler: PlanSampler,
    steps_per_epoch: usize,
    total_steps: usize,
    /// Per-model batches of `cached_epoch`.
    batches: Vec<Vec<Batch>>,
    cached_epoch: Option<usize>,
    last_plan: Option<ShufflePlan>,
}

impl<'d> Trainer<'d> {
    pub fn new(cfg: RunConfig, data: &'d Dataset) -> Result<Self> {
        cfg.validate()?;
        data.validate()?;
        if data.dim != cfg.net.input_dim() || data.classes != cfg.net.classes() {
            return Err(shape("network input/output sizes differ from the dataset"));
        }
        if data.train.is_empty() {
            return Err(invalid("training split is empty"));
        }
        let layout = Arc::new(cfg.net.layout());
        let models: Vec<LayeredParams> = (0..cfg.n_models)
            .map(|n| {
                let seed = match cfg.init_mode {
                    InitMode::Shared => cfg.init_seed,
                    InitMode::PerModel => derive_u64(cfg.init_seed, &[n as u64]),
                };
                init_with_layout(&cfg.net, layout.clone(), seed)
            })
            .collect();
        let opt = models.iter().map(OptState::new).collect();
        let spe = cfg.steps_per_epoch(data.train.len());
        Ok(Self {
            ledger: CommLedger::new(cfg.n_models, layout.len()),
            sampler: PlanSampler::new(cfg.shuffle_seed),
            steps_per_epoch: spe,
            total_steps: cfg.epochs * spe,
            state: PopulationState {
                models,
                opt,
                step: 0,
            },
            metrics: Vec::new(),
            batches: Vec::new(),
            cached_epoch: None,
            last_plan: None,
            cfg,
            data,
        })
    }

    pub fn from_checkpoint(cfg: RunConfig, data: &'d Dataset, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != cfg.fingerprint() {
            return Err(invalid(
                "checkpoint was written by a different configuration",
            ));
        }
        let mut t = Self::new(cfg, data)?;
        if ckpt.step > t.total_steps {
            return Err(invalid("checkpoint step beyond the end of the run"));
        }
        if ckpt.params.len() != t.cfg.n_models || ckpt.momentum.len() != t.cfg.n_models {
            return Err(shape("checkpoint population size differs"));
        }
        let layout: Arc<Layout> = t.state.models[0].layout().clone();
        for n in 0..t.cfg.n_models {
            t.state.models[n] = LayeredParams::from_values(layout.clone(), ckpt.params[n].clone())?;
            t.state.opt[n].momentum =
                LayeredParams::from_values(layout.clone(), ckpt.momentum[n].clone())?;
        }
        t.state.step = ckpt.step;
        t.ledger = ckpt.ledger;
        t.metrics = ckpt.metrics.clone();
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn state(&self) -> &PopulationState {
        &self.state
    }

    pub fn models(&self) -> &[LayeredParams] {
        &self.state.models
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn metrics(&self) -> &[MetricsRecord] {
        &self.metrics
    }

    pub fn step_index(&self) -> usize {
        self.state.step
    }

    pub fn total_steps(&self) -> usize {
        self.total_steps
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.total_steps
    }

    /// Plan applied by the most recent step, if that step shuffled.
    pub fn last_plan(&self) -> Option<&ShufflePlan> {
        self.last_plan.as_ref()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.cfg.fingerprint(),
            step: self.state.step,
            params: self
                .state
                .models
                .iter()
                .map(|m| m.values().to_vec())
                .collect(),
            momentum: self
                .state
                .opt
                .iter()
                .map(|o| o.momentum.values().to_vec())
                .collect(),
            ledger: self.ledger,
            metrics: self.metrics.clone(),
        }
    }

    fn refresh_batches(&mut self, epoch: usize) {
        if self.cached_epoch == Some(epoch) {
            return;
        }
        let n_train = self.data.train.len();
        self.batches = (0..self.cfg.n_models)
            .map(|n| {
                make_heterogeneous_stream(
                    n_train,
                    self.cfg.batch_size,
                    n,
                    epoch,
                    self.cfg.data_seed,
                    self.cfg.hetero,
                )
            })
            .collect();
        self.cached_epoch = Some(epoch);
    }

    /// Runs step `t = step_index()`: local updates with `cosine_lr(t)`, then
    /// coordination if the strategy's window contains `t`.
    pub fn step(&mut self, exec: &impl Executor) -> Result<()> {
        if self.is_done() {
            return Err(invalid("run already finished"));
        }
        let t = self.state.step;
        self.refresh_batches(t / self.steps_per_epoch);
        let b = t % self.steps_per_epoch;
        let lr = cosine_lr(
            t,
            self.total_steps,
            self.cfg.opt.lr_max,
            self.cfg.opt.lr_min,
        );

        let (spec, hyper, data, batches) = (&self.cfg.net, &self.cfg.opt, self.data, &self.batches);
        let mut jobs: Vec<Job<'_>> = self
            .state
            .models
            .iter_mut()
            .zip(self.state.opt.iter_mut())
            .map(|(params, opt)| Job {
                params,
                opt,
                loss: Ok(0.0),
            })
            .collect();
        exec.for_each_worker(&mut jobs, |n, job| {
            let batch = batches[n][b].materialize(&data.train, data.dim);
            job.loss = loss_and_grad(job.params, spec, &batch).and_then(|(loss, grads)| {
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        what: "loss",
                        index: n,
                    });
                }
                sgd_step(job.params, &grads, job.opt, hyper, lr)?;
                Ok(loss)
            });
        });
        let mut loss_sum = 0.0;
        for (n, job) in jobs.into_iter().enumerate() {
            match job.loss {
                Ok(l) => loss_sum += l,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::NumericAbort { step: t, model: n })
                }
                Err(e) => return Err(e),
            }
        }
        let mean_loss = loss_sum / self.cfg.n_models as f64;

        self.last_plan = None;
        if self.cfg.strategy.active_at(t) {
            self.coordinate(t, lr)?;
        }
        self.state.step = t + 1;

        let every = self.cfg.telemetry_every;
        if (every > 0 && self.state.step.is_multiple_of(every)) || self.is_done() {
            let row = telemetry_hook(
                &self.state.models,
                self.state.step,
                lr,
                mean_loss,
                &self.ledger,
            )?;
            self.metrics.push(row);
        }
        Ok(())
    }

    fn coordinate(&mut self, t: usize, lr: f64) -> Result<()> {
        let models = &mut self.state.models;
        let delta = match self.cfg.strategy.strategy {
            Strategy::None => return Ok(()),
            Strategy::Wash { p, schedule } | Strategy::WashOpt { p, schedule } => {
                let layout = models[0].layout().clone();
                let plan = self.sampler.sample(&layout, p, schedule, models.len(), t)?;
                let opt = match self.cfg.strategy.strategy {
                    Strategy::WashOpt { .. } => Some(self.state.opt.as_mut_slice()),
                    _ => None,
                };
                let delta = apply_shuffle(models, opt, &plan)?;
                self.last_plan = Some(plan);
                delta
            }
            Strategy::Papa {
                alpha,
                period,
                lr_coupled,
            } => {
                if !(t + 1).is_multiple_of(period) {
                    return Ok(());
                }
                let a = if lr_coupled {
                    coupled_alpha(alpha, lr, self.cfg.opt.lr_max)
                } else {
                    alpha
                };
                papa_ema_step(models, a)?
            }
            Strategy::PapaAll { period } => {
                if !(t + 1).is_multiple_of(period) {
                    return Ok(());
                }
                papa_all_step(models)?
            }
        };
        self.ledger.record(delta);
        Ok(())
    }

    /// Steps until `step_index() == target` or the run ends.
    pub fn run_until(&mut self, target: usize, exec: &impl Executor) -> Result<()> {
        while self.state.step < target.min(self.total_steps) {
            self.step(exec)?;
        }
        Ok(())
    }

    pub fn run(&mut self, exec: &impl Executor) -> Result<()> {
        self.run_until(self.total_steps, exec)
    }

    /// Consumes the trainer; evaluates on the test split when it is non-empty.
    pub fn finish(self) -> Result<RunResult> {
        let eval = if self.data.test.is_empty() {
            None
        } else {
            Some(evaluate(
                &self.state.models,
                &self.cfg.net,
                self.data,
                &self.cfg.eval,
            )?)
        };
        Ok(RunResult {
            state: self.state,
            metrics: self.metrics,
            ledger: self.ledger,
            eval,
        })
    }
}

/// EMA retention scaled with the learning rate: `1 − (1−α₀)·η/η_max`.
pub fn coupled_alpha(alpha0: f64, lr: f64, lr_max: f64) -> f64 {
    if lr_max <= 0.0 {
        return 1.0;
    }
    1.0 - (1.0 - alpha0) * lr / lr_max
}

/// Trains a synthetic-data run to completion.
pub fn train_population(cfg: RunConfig, exec: &impl Executor) -> Result<RunResult> {
    let data = cfg.build_dataset()?;
    train_on(cfg, &data, exec)
}

pub fn train_on(cfg: RunConfig, data: &Dataset, exec: &impl Executor) -> Result<RunResult> {
    let mut t = Trainer::new(cfg, data)?;
    t.run(exec)?;
    t.finish()
}

/// Continues a checkpointed run to completion.
pub fn resume(
    cfg: RunConfig,
    data: &Dataset,
    ckpt: &Checkpoint,
    exec: &impl Executor,
) -> Result<RunResult> {
    let mut t = Trainer::from_checkpoint(cfg, data, ckpt)?;
    t.run(exec)?;
    t.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coordination::Schedule;
    use crate::nn::Activation;
    use crate::params::consensus_distance;

    fn small(strategy: Strategy) -> RunConfig {
        RunConfig {
            net: NetSpec::new(alloc::vec![6, 10, 3], Activation::Tanh).unwrap(),
            data: DataSpec::Synthetic(SyntheticSpec {
                seed: 3,
                classes: 3,
                dim: 6,
                n_per_class: 30,
                n_test_per_class: 10,
                spread: 0.8,
                modes_per_class: 1,
            }),
            val_fraction: 0.1,
            n_models: 3,
            epochs: 3,
            batch_size: 16,
            opt: OptHyper::default(),
            strategy: StrategyConfig::new(strategy),
            init_seed: 1,
            data_seed: 2,
            shuffle_seed: 3,
            init_mode: InitMode::PerModel,
            hetero: true,
            telemetry_every: 2,
            eval: EvalOptions::default(),
        }
    }

    fn finals(cfg: RunConfig) -> Vec<Vec<f64>> {
        train_population(cfg, &Sequential)
            .unwrap()
            .state
            .models
            .into_iter()
            .map(LayeredParams::into_values)
            .collect()
    }

    #[test]
    fn wash_with_zero_probability_equals_none() {
        let wash = finals(small(Strategy::Wash {
            p: 0.0,
            schedule: Schedule::Constant,
        }));
        assert_eq!(wash, finals(small(Strategy::None)));
    }

    #[test]
    fn zero_window_disables_coordination() {
        let base = finals(small(Strategy::None));
        for s in [
            Strategy::Wash {
                p: 0.5,
                schedule: Schedule::Decreasing,
            },
            Strategy::Papa {
                alpha: 0.9,
                period: 2,
                lr_coupled: false,
            },
            Strategy::PapaAll { period: 1 },
        ] {
            let mut cfg = small(s);
            cfg.strategy = cfg.strategy.with_window(0, 0);
            assert_eq!(finals(cfg), base);
        }
    }

    #[test]
    fn papa_all_every_step_keeps_consensus() {
        let mut cfg = small(Strategy::PapaAll { period: 1 });
        cfg.telemetry_every = 1;
        let data = cfg.build_dataset().unwrap();
        let mut t = Trainer::new(cfg, &data).unwrap();
        while !t.is_done() {
            t.step(&Sequential).unwrap();
            assert_eq!(consensus_distance(t.models()).unwrap().sum_sq, 0.0);
        }
        assert_eq!(t.metrics().len(), t.total_steps());
    }

    #[test]
    fn single_model_matches_plain_loop() {
        let mut cfg = small(Strategy::None);
        cfg.n_models = 1;
        let data = cfg.build_dataset().unwrap();
        let got = train_on(cfg.clone(), &data, &Sequential).unwrap();

        let mut theta = crate::nn::init_params(&cfg.net, derive_u64(cfg.init_seed, &[0]));
        let mut st = OptState::new(&theta);
        let spe = cfg.steps_per_epoch(data.train.len());
        let total = cfg.epochs * spe;
        for t in 0..total {
            let batches = make_heterogeneous_stream(
                data.train.len(),
                cfg.batch_size,
                0,
                t / spe,
                cfg.data_seed,
                true,
            );
            let batch = batches[t % spe].materialize(&data.train, data.dim);
            let (_, g) = loss_and_grad(&theta, &cfg.net, &batch).unwrap();
            sgd_step(
                &mut theta,
                &g,
                &mut st,
                &cfg.opt,
                cosine_lr(t, total, 0.1, 1e-4),
            )
            .unwrap();
        }
        assert_eq!(got.state.models[0], theta);
    }

    #[test]
    fn window_end_bounds_plans() {
        let mut cfg = small(Strategy::Wash {
            p: 0.2,
            schedule: Schedule::Constant,
        });
        cfg.strategy = cfg.strategy.with_window(3, 7);
        let data = cfg.build_dataset().unwrap();
        let mut t = Trainer::new(cfg, &data).unwrap();
        let mut steps = Vec::new();
        while !t.is_done() {
            t.step(&Sequential).unwrap();
            if let Some(p) = t.last_plan() {
                steps.push(p.step());
            }
        }
        assert_eq!(steps, (3..7).collect::<Vec<_>>());
        assert_eq!(t.ledger().events, 4);
    }

    #[test]
    fn resume_is_bitwise() {
        let cfg = small(Strategy::WashOpt {
            p: 0.1,
            schedule: Schedule::Decreasing,
        });
        let data = cfg.build_dataset().unwrap();
        let full = train_on(cfg.clone(), &data, &Sequential).unwrap();
        let mut t = Trainer::new(cfg.clone(), &data).unwrap();
        t.run_until(7, &Sequential).unwrap();
        let ck = t.checkpoint();
        let resumed = resume(cfg.clone(), &data, &ck, &Sequential).unwrap();
        assert_eq!(resumed.state, full.state);
        assert_eq!(resumed.metrics, full.metrics);
        assert_eq!(resumed.ledger, full.ledger);

        let mut other = cfg;
        other.shuffle_seed += 1;
        assert!(Trainer::from_checkpoint(other, &data, &ck).is_err());
    }

    #[test]
    fn telemetry_cadence_and_final_row() {
        let cfg = small(Strategy::Papa {
            alpha: 0.5,
            period: 2,
            lr_coupled: true,
        });
        let data = cfg.build_dataset().unwrap();
        let total = cfg.total_steps(data.train.len());
        let res = train_on(cfg, &data, &Sequential).unwrap();
        let steps: Vec<usize> = res.metrics.iter().map(|m| m.step).collect();
        let mut expect: Vec<usize> = (1..=total).filter(|s| s % 2 == 0).collect();
        if !total.is_multiple_of(2) {
            expect.push(total);
        }
        assert_eq!(steps, expect);
        assert_eq!(res.ledger.events as usize, total / 2);
        assert!(res.eval.unwrap().greedy_soup.is_some());
    }

    #[test]
    fn non_finite_loss_aborts_with_step() {
        let mut cfg = small(Strategy::None);
        cfg.opt.lr_max = 1e200;
        cfg.opt.lr_min = 1e200;
        let err = train_population(cfg, &Sequential).unwrap_err();
        assert!(matches!(err, Error::NumericAbort { .. }), "{err:?}");
    }

    #[test]
    fn coupled_alpha_endpoints() {
        assert_eq!(coupled_alpha(0.99, 0.1, 0.1), 0.99);
        assert_eq!(coupled_alpha(0.99, 0.0, 0.1), 1.0);
    }

    #[test]
    fn fingerprint_tracks_fields() {
        let a = small(Strategy::None);
        let mut b = a.clone();
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.opt.lr_max = 0.1 + 1e-16;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
