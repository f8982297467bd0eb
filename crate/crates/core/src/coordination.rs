//! Coordination steps applied to a population between local SGD steps.
//!
//! * parameter shuffling: each coordinate is selected with a layer-dependent
//!   probability, and a selected coordinate is permuted across all models by
//!   one uniform permutation (optionally together with its momentum entry);
//! * EMA toward the consensus every `T` steps;
//! * full averaging every `T` steps.
//!
//! Shuffling preserves the multiset of values at every coordinate, hence the
//! consensus mean and the consensus distance. The EMA contracts the distance
//! by `α²`. The communication ledger counts one scalar per selected
//! coordinate per model, fixed points included, with a second counter that
//! skips models whose value does not move.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};
use crate::optim::OptState;
use crate::params::{check_homogeneous, mean_into, LayeredParams, Layout};
use crate::rng::{stream, Purpose};

/// How the shuffle probability varies with depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Decreasing,
    Constant,
    Increasing,
}

impl Schedule {
    /// Average of the per-layer factor over equally sized layers.
    pub fn mean_factor(self) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Decreasing | Schedule::Increasing => 0.5,
        }
    }
}

/// Shuffle probability of layer `l` out of `num_layers`.
///
/// Decreasing: `p(1 − l/(L−1))`; constant: `p`; increasing: `p·l/(L−1)`.
/// A single-layer model only admits the constant schedule.
pub fn layer_probability(l: usize, num_layers: usize, p: f64, schedule: Schedule) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("base probability {p} outside [0, 1]")));
    }
    if l >= num_layers {
        return Err(invalid(format!(
            "layer {l} out of range for {num_layers} layers"
        )));
    }
    if num_layers == 1 {
        return match schedule {
            Schedule::Constant => Ok(p),
            _ => Err(invalid("depth schedules need at least two layers")),
        };
    }
    let depth = l as f64 / (num_layers - 1) as f64;
    Ok(match schedule {
        Schedule::Decreasing => p * (1.0 - depth),
        Schedule::Constant => p,
        Schedule::Increasing => p * depth,
    })
}

/// Coordination strategy and its hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    None,
    Wash {
        p: f64,
        schedule: Schedule,
    },
    /// Shuffles the momentum buffer together with the parameters.
    WashOpt {
        p: f64,
        schedule: Schedule,
    },
    Papa {
        alpha: f64,
        period: usize,
        /// Scale the retention toward 1 as the learning rate decays:
        /// `α(t) = 1 − (1 − α)·η(t)/η_max`.
        #[serde(default)]
        lr_coupled: bool,
    },
    PapaAll {
        period: usize,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    None,
    Wash,
    WashOpt,
    Papa,
    PapaAll,
}

impl StrategyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StrategyKind::None => "none",
            StrategyKind::Wash => "wash",
            StrategyKind::WashOpt => "wash_opt",
            StrategyKind::Papa => "papa",
            StrategyKind::PapaAll => "papa_all",
        }
    }
}

impl core::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl core::str::FromStr for StrategyKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => StrategyKind::None,
            "wash" => StrategyKind::Wash,
            "wash_opt" => StrategyKind::WashOpt,
            "papa" => StrategyKind::Papa,
            "papa_all" => StrategyKind::PapaAll,
            other => return Err(invalid(format!("unknown strategy kind `{other}`"))),
        })
    }
}

impl Strategy {
    pub fn kind(&self) -> StrategyKind {
        match self {
            Strategy::None => StrategyKind::None,
            Strategy::Wash { .. } => StrategyKind::Wash,
            Strategy::WashOpt { .. } => StrategyKind::WashOpt,
            Strategy::Papa { .. } => StrategyKind::Papa,
            Strategy::PapaAll { .. } => StrategyKind::PapaAll,
        }
    }

    /// `(p, schedule, include_opt)` for the shuffling strategies.
    pub fn shuffle_params(&self) -> Option<(f64, Schedule, bool)> {
        match *self {
            Strategy::Wash { p, schedule } => Some((p, schedule, false)),
            Strategy::WashOpt { p, schedule } => Some((p, schedule, true)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Strategy::None => Ok(()),
            Strategy::Wash { p, .. } | Strategy::WashOpt { p, .. } => {
                if (0.0..=1.0).contains(&p) {
                    Ok(())
                } else {
                    Err(invalid(format!("shuffle probability {p} outside [0, 1]")))
                }
            }
            Strategy::Papa { alpha, period, .. } => {
                if !(alpha > 0.0 && alpha < 1.0) {
                    return Err(invalid(format!("EMA retention {alpha} outside (0, 1)")));
                }
                if period == 0 {
                    return Err(invalid("EMA period must be at least one step"));
                }
                Ok(())
            }
            Strategy::PapaAll { period } => {
                if period == 0 {
                    Err(invalid("averaging period must be at least one step"))
                } else {
                    Ok(())
                }
            }
        }
    }
}

/// Half-open step range `[start, end)` during which coordination runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn contains(&self, step: usize) -> bool {
        self.start <= step && step < self.end
    }

    pub fn len(&self) -> usize {
        self.end.saturating_sub(self.start)
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub strategy: Strategy,
    /// `None` means the whole run.
    pub window: Option<Window>,
}

impl StrategyConfig {
    pub fn new(strategy: Strategy) -> Self {
        Self {
            strategy,
            window: None,
        }
    }

    pub fn with_window(mut self, start: usize, end: usize) -> Self {
        self.window = Some(Window { start, end });
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.strategy.validate()?;
        if let Some(w) = self.window {
            if w.start > w.end {
                return Err(invalid(format!(
                    "window start {} after end {}",
                    w.start, w.end
                )));
            }
        }
        Ok(())
    }

    pub fn active_at(&self, step: usize) -> bool {
        self.window.is_none_or(|w| w.contains(step))
    }
}

/// One step's selected coordinates and their permutations.
///
/// Entry `k` moves model `perm[n]`'s value at `coords[k]` into model `n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShufflePlan {
    step: usize,
    n_models: usize,
    coords: Vec<usize>,
    layers: Vec<usize>,
    perms: Vec<u32>,
}

/// Borrowed view of one plan entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry<'a> {
    pub layer: usize,
    pub coord: usize,
    pub perm: &'a [u32],
}

impl ShufflePlan {
    pub fn empty(step: usize, n_models: usize) -> Self {
        Self {
            step,
            n_models,
            coords: Vec::new(),
            layers: Vec::new(),
            perms: Vec::new(),
        }
    }

    /// Builds a plan from explicit entries, checking that coordinates are
    /// distinct and every permutation is a bijection on `0..n_models`.
    pub fn from_entries(
        step: usize,
        n_models: usize,
        entries: impl IntoIterator<Item = (usize, usize, Vec<u32>)>,
    ) -> Result<Self> {
        let mut plan = Self::empty(step, n_models);
        for (layer, coord, perm) in entries {
            plan.push(layer, coord, &perm)?;
        }
        let mut seen = plan.coords.clone();
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(invalid("plan selects a coordinate twice"));
        }
        Ok(plan)
    }

    fn push(&mut self, layer: usize, coord: usize, perm: &[u32]) -> Result<()> {
        if perm.len() != self.n_models {
            return Err(invalid(format!(
                "permutation of length {} for {} models",
                perm.len(),
                self.n_models
            )));
        }
        let mut hit = vec![false; self.n_models];
        for &p in perm {
            let p = p as usize;
            if p >= self.n_models || hit[p] {
                return Err(invalid("plan entry is not a permutation"));
            }
            hit[p] = true;
        }
        self.coords.push(coord);
        self.layers.push(layer);
        self.perms.extend_from_slice(perm);
        Ok(())
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn n_models(&self) -> usize {
        self.n_models
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[usize] {
        &self.coords
    }

    pub fn entries(&self) -> impl Iterator<Item = PlanEntry<'_>> + '_ {
        let n = self.n_models;
        self.coords
            .iter()
            .zip(&self.layers)
            .enumerate()
            .map(move |(k, (&coord, &layer))| PlanEntry {
                layer,
                coord,
                perm: &self.perms[k * n..(k + 1) * n],
            })
    }

    /// Scalars sent under the nominal accounting: one per selected coordinate
    /// per model, doubled when momentum travels too.
    pub fn nominal_scalars(&self, include_opt: bool) -> u64 {
        (self.n_models * self.len()) as u64 * if include_opt { 2 } else { 1 }
    }

    /// Scalars sent when models whose value stays put send nothing.
    pub fn effective_scalars(&self, include_opt: bool) -> u64 {
        let moved = self
            .entries()
            .map(|e| {
                e.perm
                    .iter()
                    .enumerate()
                    .filter(|(n, &p)| *n != p as usize)
                    .count()
            })
            .sum::<usize>() as u64;
        moved * if include_opt { 2 } else { 1 }
    }
}

/// Which selection algorithm the sampler uses per layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SamplingPath {
    /// Elementwise below the threshold, blockwise above.
    #[default]
    Auto,
    Elementwise,
    Blockwise,
}

/// Coordinates per selection/permutation stream block.
pub const BLOCK: usize = 4096;
/// Expected selections per layer above which `Auto` samples blockwise.
pub const BLOCKWISE_THRESHOLD: f64 = 1e4;

/// Draws shuffle plans from counter-keyed streams.
///
/// The elementwise path draws one Bernoulli per coordinate; the blockwise
/// path draws a binomial count per layer and then that many distinct
/// indices. Both give every coordinate an independent selection with
/// probability `p_l`, so plans agree in distribution but not bit for bit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanSampler {
    pub seed: u64,
    pub path: SamplingPath,
}

impl PlanSampler {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            path: SamplingPath::Auto,
        }
    }

    pub fn with_path(mut self, path: SamplingPath) -> Self {
        self.path = path;
        self
    }

    pub fn sample(
        &self,
        layout: &Layout,
        p: f64,
        schedule: Schedule,
        n_models: usize,
        step: usize,
    ) -> Result<ShufflePlan> {
        if n_models == 0 || n_models > u32::MAX as usize {
            return Err(invalid("population size out of range"));
        }
        let mut plan = ShufflePlan::empty(step, n_models);
        let mut selected = Vec::new();
        let mut perm: Vec<u32> = Vec::with_capacity(n_models);
        for l in 0..layout.num_layers() {
            let pl = layer_probability(l, layout.num_layers(), p, schedule)?;
            let (start, end) = layout.layer_range(l);
            selected.clear();
            self.select(l, pl, end - start, step, &mut selected);
            let mut block = usize::MAX;
            let mut rng = None;
            for &off in &selected {
                if off / BLOCK != block {
                    block = off / BLOCK;
                    rng = Some(stream(
                        self.seed,
                        Purpose::ShufflePerm,
                        &[step as u64, l as u64, block as u64],
                    ));
                }
                perm.clear();
                perm.extend(0..n_models as u32);
                perm.shuffle(rng.as_mut().expect("opened above"));
                plan.coords.push(start + off);
                plan.layers.push(l);
                plan.perms.extend_from_slice(&perm);
            }
        }
        Ok(plan)
    }

    /// Sorted offsets within a layer of length `len`.
    fn select(&self, layer: usize, pl: f64, len: usize, step: usize, out: &mut Vec<usize>) {
        if pl <= 0.0 || len == 0 {
            return;
        }
        let blockwise = match self.path {
            SamplingPath::Auto => pl * len as f64 > BLOCKWISE_THRESHOLD,
            SamplingPath::Elementwise => false,
            SamplingPath::Blockwise => true,
        };
        let key = [step as u64, layer as u64];
        if blockwise {
            let mut rng = stream(self.seed, Purpose::ShuffleCount, &key);
            let count = if pl >= 1.0 {
                len
            } else {
                Binomial::new(len as u64, pl)
                    .expect("p in [0,1]")
                    .sample(&mut rng) as usize
            };
            out.extend(rand::seq::index::sample(&mut rng, len, count).iter());
            out.sort_unstable();
        } else {
            for (b, chunk_start) in (0..len).step_by(BLOCK).enumerate() {
                let mut rng = stream(
                    self.seed,
                    Purpose::ShuffleSelect,
                    &[key[0], key[1], b as u64],
                );
                for off in chunk_start..(chunk_start + BLOCK).min(len) {
                    if rng.random::<f64>() < pl {
                        out.push(off);
                    }
                }
            }
        }
    }
}

/// Samples step `step`'s plan with the default sampling path.
pub fn sample_shuffle_plan(
    seed: u64,
    layout: &Layout,
    p: f64,
    schedule: Schedule,
    n_models: usize,
    step: usize,
) -> Result<ShufflePlan> {
    PlanSampler::new(seed).sample(layout, p, schedule, n_models, step)
}

/// Scalars exchanged by one coordination event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CommDelta {
    pub nominal: u64,
    pub effective: u64,
}

/// Cumulative communication of a run, summed over all models.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CommLedger {
    pub n_models: usize,
    pub d: usize,
    pub scalars_nominal: u64,
    pub scalars_effective: u64,
    pub events: u64,
}

impl CommLedger {
    pub fn new(n_models: usize, d: usize) -> Self {
        Self {
            n_models,
            d,
            ..Self::default()
        }
    }

    pub fn record(&mut self, delta: CommDelta) {
        self.scalars_nominal += delta.nominal;
        self.scalars_effective += delta.effective;
        self.events += 1;
    }

    /// Nominal scalars sent by one model.
    pub fn per_model(&self) -> f64 {
        self.scalars_nominal as f64 / self.n_models.max(1) as f64
    }

    /// Volume in units of one full-population all-reduce (`N·d` scalars).
    pub fn allreduce_equivalent(&self) -> f64 {
        self.scalars_nominal as f64 / (self.n_models.max(1) * self.d.max(1)) as f64
    }
}

/// Applies a plan in place and returns the scalars it moved.
///
/// With `opt` set, momentum entries at the selected coordinates follow the
/// same permutation.
pub fn apply_shuffle(
    models: &mut [LayeredParams],
    opt: Option<&mut [OptState]>,
    plan: &ShufflePlan,
) -> Result<CommDelta> {
    check_homogeneous(models)?;
    if plan.n_models != models.len() {
        return Err(shape(format!(
            "plan for {} models applied to {}",
            plan.n_models,
            models.len()
        )));
    }
    let d = models[0].len();
    if plan.coords.iter().any(|&c| c >= d) {
        return Err(shape("plan coordinate beyond parameter count"));
    }
    let include_opt = opt.is_some();
    if let Some(states) = &opt {
        if states.len() != models.len() {
            return Err(shape("one optimizer state per model required"));
        }
    }
    let mut scratch = vec![0.0; models.len()];
    for e in plan.entries() {
        permute_coord(models.iter_mut().map(|m| m.values_mut()), e, &mut scratch);
    }
    if let Some(states) = opt {
        for e in plan.entries() {
            permute_coord(
                states.iter_mut().map(|s| s.momentum.values_mut()),
                e,
                &mut scratch,
            );
        }
    }
    Ok(CommDelta {
        nominal: plan.nominal_scalars(include_opt),
        effective: plan.effective_scalars(include_opt),
    })
}

fn permute_coord<'a>(
    buffers: impl Iterator<Item = &'a mut [f64]>,
    e: PlanEntry<'_>,
    scratch: &mut [f64],
) {
    let mut bufs: Vec<&mut [f64]> = buffers.collect();
    for (s, b) in scratch.iter_mut().zip(&bufs) {
        *s = b[e.coord];
    }
    for (n, b) in bufs.iter_mut().enumerate() {
        b[e.coord] = scratch[e.perm[n] as usize];
    }
}

/// `θ_n ← αθ_n + (1−α)θ̄` for every model.
pub fn papa_ema_step(models: &mut [LayeredParams], alpha: f64) -> Result<CommDelta> {
    check_homogeneous(models)?;
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(invalid(format!("EMA retention {alpha} outside (0, 1]")));
    }
    let mut mean = vec![0.0; models[0].len()];
    mean_into(models, &mut mean);
    let beta = 1.0 - alpha;
    for m in models.iter_mut() {
        for (v, c) in m.values_mut().iter_mut().zip(&mean) {
            *v = alpha * *v + beta * c;
        }
    }
    Ok(full_exchange(models))
}

/// Replaces every model by the consensus.
pub fn papa_all_step(models: &mut [LayeredParams]) -> Result<CommDelta> {
    check_homogeneous(models)?;
    let mut mean = vec![0.0; models[0].len()];
    mean_into(models, &mut mean);
    for m in models.iter_mut() {
        m.values_mut().copy_from_slice(&mean);
    }
    Ok(full_exchange(models))
}

fn full_exchange(models: &[LayeredParams]) -> CommDelta {
    let s = (models.len() * models[0].len()) as u64;
    CommDelta {
        nominal: s,
        effective: s,
    }
}

/// Expected per-step communication of a strategy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommExpectation {
    /// Expected scalars sent per model per step, as a fraction of `d`.
    pub fraction_per_step: f64,
    /// The same quantity relative to EMA averaging with period `papa_period`.
    pub ratio_vs_papa: f64,
}

/// Nominal communication: shuffling sends `p·m` of the parameters per step
/// (`m` the schedule's mean factor, ½ for the depth schedules), doubled with
/// momentum; averaging every `T` steps sends `1/T`.
pub fn expected_comm_fraction(strategy: &Strategy, papa_period: usize) -> Result<CommExpectation> {
    if papa_period == 0 {
        return Err(invalid("reference period must be positive"));
    }
    strategy.validate()?;
    let t = papa_period as f64;
    // ratio computed as fraction·T directly so simple ratios come out exact
    let (fraction, ratio) = match *strategy {
        Strategy::None => (0.0, 0.0),
        Strategy::Wash { p, schedule } => {
            let f = p * schedule.mean_factor();
            (f, f * t)
        }
        Strategy::WashOpt { p, schedule } => {
            let f = p * schedule.mean_factor();
            (2.0 * f, 2.0 * f * t)
        }
        Strategy::Papa { period, .. } | Strategy::PapaAll { period } => {
            (1.0 / period as f64, t / period as f64)
        }
    };
    Ok(CommExpectation {
        fraction_per_step: fraction,
        ratio_vs_papa: ratio,
    })
}

/// Exact expected scalars per shuffle step for `layout`, summed over models.
pub fn expected_shuffle_scalars(
    layout: &Layout,
    strategy: &Strategy,
    n_models: usize,
) -> Result<f64> {
    let Some((p, schedule, opt)) = strategy.shuffle_params() else {
        return Ok(0.0);
    };
    let mut per_model = 0.0;
    for l in 0..layout.num_layers() {
        per_model +=
            layer_probability(l, layout.num_layers(), p, schedule)? * layout.layer_len(l) as f64;
    }
    Ok(per_model * n_models as f64 * if opt { 2.0 } else { 1.0 })
}
