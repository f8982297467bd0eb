//! A small fully connected classifier with manual backpropagation, plus the
//! synthetic datasets and per-model batch streams used to train populations.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::params::{LayeredParams, Layout};
use crate::rng::{stream, Purpose};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => libm::tanh(z),
        }
    }

    /// Derivative expressed through the activation output `a`.
    #[inline]
    fn slope(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Layer widths from input to classes, and the hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl NetSpec {
    pub fn new(dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self { dims, activation };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.len() < 2 {
            return Err(invalid("net needs an input width and a class count"));
        }
        if self.dims.contains(&0) {
            return Err(invalid("layer widths must be positive"));
        }
        if self.classes() < 2 {
            return Err(invalid("classifier needs at least two classes"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().expect("validated")
    }

    /// Number of weight layers.
    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// Weight `[out, in]` then bias `[out]` for each layer.
    pub fn layout(&self) -> Layout {
        let mut tensors = Vec::with_capacity(2 * self.num_layers());
        for (l, w) in self.dims.windows(2).enumerate() {
            tensors.push((l, vec![w[1], w[0]]));
            tensors.push((l, vec![w[1]]));
        }
        Layout::new(&tensors).expect("net layout is layer-major")
    }

    pub fn param_count(&self) -> usize {
        self.dims.windows(2).map(|w| w[1] * (w[0] + 1)).sum()
    }
}

/// Scaled uniform init in `±sqrt(6 / (fan_in + fan_out))`, zero biases.
pub fn init_params(spec: &NetSpec, seed: u64) -> LayeredParams {
    init_with_layout(spec, Arc::new(spec.layout()), seed)
}

pub fn init_with_layout(spec: &NetSpec, layout: Arc<Layout>, seed: u64) -> LayeredParams {
    let mut p = LayeredParams::zeros(layout);
    for (l, w) in spec.dims.windows(2).enumerate() {
        let bound = libm::sqrt(6.0 / (w[0] + w[1]) as f64);
        let mut rng = stream(seed, Purpose::Init, &[l as u64]);
        for v in p.tensor_mut(2 * l) {
            *v = rng.random_range(-bound..=bound);
        }
    }
    p
}

/// Row-major `rows × cols` matrix of logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Logits {
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// Activations of every layer; `acts[0]` is the input.
struct Trace {
    acts: Vec<Vec<f64>>,
}

fn check_inputs(spec: &NetSpec, params: &LayeredParams, inputs: &[f64]) -> Result<usize> {
    let dim = spec.input_dim();
    if !inputs.len().is_multiple_of(dim) {
        return Err(crate::error::shape(format!(
            "input buffer of {} is not a multiple of dim {dim}",
            inputs.len()
        )));
    }
    if params.len() != spec.param_count() {
        return Err(crate::error::shape("parameters do not match net spec"));
    }
    if let Some(i) = inputs.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite {
            what: "input",
            index: i,
        });
    }
    Ok(inputs.len() / dim)
}

fn run_forward(spec: &NetSpec, params: &LayeredParams, inputs: &[f64], rows: usize) -> Trace {
    let last = spec.num_layers() - 1;
    let mut acts = Vec::with_capacity(spec.dims.len());
    acts.push(inputs.to_vec());
    for l in 0..=last {
        let (fan_in, fan_out) = (spec.dims[l], spec.dims[l + 1]);
        let w = params.tensor(2 * l);
        let b = params.tensor(2 * l + 1);
        let prev = &acts[l];
        let mut out = vec![0.0; rows * fan_out];
        for r in 0..rows {
            let x = &prev[r * fan_in..(r + 1) * fan_in];
            let z = &mut out[r * fan_out..(r + 1) * fan_out];
            for (j, zj) in z.iter_mut().enumerate() {
                let wj = &w[j * fan_in..(j + 1) * fan_in];
                let mut s = b[j];
                for (wk, xk) in wj.iter().zip(x) {
                    s += wk * xk;
                }
                *zj = if l == last {
                    s
                } else {
                    spec.activation.apply(s)
                };
            }
        }
        acts.push(out);
    }
    Trace { acts }
}

/// Logits for a row-major `n × dim` input buffer.
pub fn forward(params: &LayeredParams, spec: &NetSpec, inputs: &[f64]) -> Result<Logits> {
    let rows = check_inputs(spec, params, inputs)?;
    let mut trace = run_forward(spec, params, inputs, rows);
    Ok(Logits {
        rows,
        cols: spec.classes(),
        data: trace.acts.pop().expect("output layer"),
    })
}

/// Numerically stable softmax in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Inputs, labels and label smoothing for one gradient evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchData {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
    pub label_smoothing: f64,
}

/// Mean softmax cross-entropy over the batch and its gradient.
///
/// Label smoothing `ε` replaces the one-hot target by `(1−ε)·onehot + ε/K`.
pub fn loss_and_grad(
    params: &LayeredParams,
    spec: &NetSpec,
    batch: &BatchData,
) -> Result<(f64, LayeredParams)> {
    let rows = check_inputs(spec, params, &batch.inputs)?;
    let k = spec.classes();
    if batch.labels.len() != rows {
        return Err(crate::error::shape("label count differs from input rows"));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&y| y >= k) {
        return Err(invalid(format!("label {bad} out of range for {k} classes")));
    }
    if rows == 0 {
        return Ok((0.0, LayeredParams::zeros(params.layout().clone())));
    }
    let eps = batch.label_smoothing;
    let off = eps / k as f64;
    let trace = run_forward(spec, params, &batch.inputs, rows);

    let mut delta = trace.acts.last().expect("output").clone();
    let mut loss = 0.0;
    let scale = 1.0 / rows as f64;
    for (r, &y) in batch.labels.iter().enumerate() {
        let row = &mut delta[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(row.iter().map(|v| libm::exp(v - max)).sum::<f64>());
        for (c, v) in row.iter_mut().enumerate() {
            let target = if c == y { 1.0 - eps + off } else { off };
            let logp = *v - lse;
            loss -= target * logp;
            *v = (libm::exp(logp) - target) * scale;
        }
    }
    loss *= scale;

    let mut grads = LayeredParams::zeros(params.layout().clone());
    for l in (0..spec.num_layers()).rev() {
        let (fan_in, fan_out) = (spec.dims[l], spec.dims[l + 1]);
        let prev = &trace.acts[l];
        {
            let gw = grads.tensor_mut(2 * l);
            for r in 0..rows {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                let x = &prev[r * fan_in..(r + 1) * fan_in];
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    let row = &mut gw[j * fan_in..(j + 1) * fan_in];
                    for (g, xk) in row.iter_mut().zip(x) {
                        *g += dj * xk;
                    }
                }
            }
        }
        {
            let gb = grads.tensor_mut(2 * l + 1);
            for r in 0..rows {
                for (g, d) in gb.iter_mut().zip(&delta[r * fan_out..(r + 1) * fan_out]) {
                    *g += d;
                }
            }
        }
        if l > 0 {
            let w = params.tensor(2 * l);
            let mut next = vec![0.0; rows * fan_in];
            for r in 0..rows {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                let out = &mut next[r * fan_in..(r + 1) * fan_in];
                for (j, &dj) in d.iter().enumerate() {
                    if dj == 0.0 {
                        continue;
                    }
                    for (o, wk) in out.iter_mut().zip(&w[j * fan_in..(j + 1) * fan_in]) {
                        *o += dj * wk;
                    }
                }
                let a = &prev[r * fan_in..(r + 1) * fan_in];
                for (o, &ak) in out.iter_mut().zip(a) {
                    *o *= spec.activation.slope(ak);
                }
            }
            delta = next;
        }
    }
    Ok((loss, grads))
}

/// One labelled split, inputs stored row-major.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub inputs: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input(&self, i: usize, dim: usize) -> &[f64] {
        &self.inputs[i * dim..(i + 1) * dim]
    }

    fn push(&mut self, x: &[f64], y: usize) {
        self.inputs.extend_from_slice(x);
        self.labels.push(y);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub dim: usize,
    pub classes: usize,
    pub train: Split,
    pub val: Split,
    pub test: Split,
}

impl Dataset {
    pub fn split(&self, tag: SplitTag) -> &Split {
        match tag {
            SplitTag::Train => &self.train,
            SplitTag::Val => &self.val,
            SplitTag::Test => &self.test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("train", &self.train),
            ("val", &self.val),
            ("test", &self.test),
        ] {
            if s.inputs.len() != s.labels.len() * self.dim {
                return Err(crate::error::shape(format!(
                    "{name} split inputs/labels disagree"
                )));
            }
            if let Some(y) = s.labels.iter().find(|&&y| y >= self.classes) {
                return Err(invalid(format!(
                    "{name} label {y} >= {} classes",
                    self.classes
                )));
            }
            if let Some(i) = s.inputs.iter().position(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    what: "dataset input",
                    index: i,
                });
            }
        }
        Ok(())
    }

    /// Moves `fraction` of the training examples (at least one) into the
    /// validation split, chosen by a seeded shuffle. Existing validation
    /// examples are kept.
    pub fn with_validation_holdout(mut self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(invalid("validation fraction must lie in [0, 1)"));
        }
        let n = self.train.len();
        let take = (libm::round(n as f64 * fraction) as usize).max(usize::from(fraction > 0.0));
        if take == 0 {
            return Ok(self);
        }
        if take >= n {
            return Err(invalid("validation holdout would empty the training split"));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(seed, Purpose::DataOrder, &[u64::MAX]));
        let mut held = vec![false; n];
        for &i in &order[..take] {
            held[i] = true;
        }
        let old = core::mem::take(&mut self.train);
        for i in 0..n {
            let x = old.input(i, self.dim);
            if held[i] {
                self.val.push(x, old.labels[i]);
            } else {
                self.train.push(x, old.labels[i]);
            }
        }
        Ok(self)
    }
}

/// Gaussian-mixture classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    pub n_test_per_class: usize,
    /// Standard deviation of the isotropic noise around each mode.
    pub spread: f64,
    /// Number of cluster centres per class.
    pub modes_per_class: usize,
}

/// Each class is a mixture of `modes_per_class` Gaussian clusters with
/// centres drawn from `N(0, I)`; examples are spread around their mode by
/// `spread`. Examples cycle through classes so every split is balanced.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 || spec.dim == 0 || spec.modes_per_class == 0 {
        return Err(invalid(
            "synthetic task needs >= 2 classes, dim > 0, >= 1 mode",
        ));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(invalid("spread must be finite and non-negative"));
    }
    let mut rng = stream(spec.seed, Purpose::Synthetic, &[0]);
    let centres: Vec<Vec<f64>> = (0..spec.classes * spec.modes_per_class)
        .map(|_| {
            (0..spec.dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect()
        })
        .collect();
    let draw = |split: u64, per_class: usize| {
        let mut rng = stream(spec.seed, Purpose::Synthetic, &[split]);
        let mut s = Split::default();
        let mut x = vec![0.0; spec.dim];
        for i in 0..per_class {
            for c in 0..spec.classes {
                let mode = (i + rng.random_range(0..spec.modes_per_class)) % spec.modes_per_class;
                let centre = &centres[c * spec.modes_per_class + mode];
                for (xk, ck) in x.iter_mut().zip(centre) {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *xk = ck + spec.spread * z;
                }
                s.push(&x, c);
            }
        }
        s
    };
    Ok(Dataset {
        dim: spec.dim,
        classes: spec.classes,
        train: draw(1, spec.n_per_class),
        val: Split::default(),
        test: draw(2, spec.n_test_per_class),
    })
}

/// Input-jitter levels handed out to models when heterogeneity is on.
pub const JITTER_MENU: [f64; 4] = [0.0, 0.1, 0.2, 0.3];
/// Label-smoothing levels handed out to models when heterogeneity is on.
pub const SMOOTHING_MENU: [f64; 4] = [0.0, 0.05, 0.1, 0.2];

/// Per-model regularization drawn from the menus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeteroAssignment {
    pub jitter_sigma: f64,
    pub label_smoothing: f64,
}

impl HeteroAssignment {
    pub const NONE: Self = Self {
        jitter_sigma: 0.0,
        label_smoothing: 0.0,
    };
}

/// Assignment for model `n`. The menus are shuffled once from `base_seed`
/// and models take entries in order, cycling when `n` exceeds the menu size.
pub fn hetero_assignment(base_seed: u64, n: usize) -> HeteroAssignment {
    let mut rng = stream(base_seed, Purpose::Hetero, &[]);
    let mut jit: Vec<usize> = (0..JITTER_MENU.len()).collect();
    let mut smo: Vec<usize> = (0..SMOOTHING_MENU.len()).collect();
    jit.shuffle(&mut rng);
    smo.shuffle(&mut rng);
    HeteroAssignment {
        jitter_sigma: JITTER_MENU[jit[n % jit.len()]],
        label_smoothing: SMOOTHING_MENU[smo[n % smo.len()]],
    }
}

/// Indices of one minibatch plus the model's regularization.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub hetero: HeteroAssignment,
    /// Key of the jitter noise stream: `(base_seed, model, epoch, batch)`.
    pub noise_key: [u64; 4],
}

impl Batch {
    /// Gathers the examples and applies input jitter.
    pub fn materialize(&self, split: &Split, dim: usize) -> BatchData {
        let mut inputs = Vec::with_capacity(self.indices.len() * dim);
        for &i in &self.indices {
            inputs.extend_from_slice(split.input(i, dim));
        }
        if self.hetero.jitter_sigma > 0.0 {
            let [seed, rest @ ..] = self.noise_key;
            let mut rng = stream(seed, Purpose::Jitter, &rest);
            for x in &mut inputs {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x += self.hetero.jitter_sigma * z;
            }
        }
        BatchData {
            inputs,
            labels: self.indices.iter().map(|&i| split.labels[i]).collect(),
            label_smoothing: self.hetero.label_smoothing,
        }
    }
}

/// Batches per epoch: `ceil(n_train / batch_size)`.
pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train.div_ceil(batch_size)
}

/// Model `n`'s minibatches for `epoch`. The order is a shuffle keyed by
/// `(base_seed, n, epoch)`; the final batch may be short.
pub fn make_heterogeneous_stream(
    n_train: usize,
    batch_size: usize,
    model: usize,
    epoch: usize,
    base_seed: u64,
    hetero: bool,
) -> Vec<Batch> {
    assert!(batch_size > 0, "batch size must be positive");
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut stream(
        base_seed,
        Purpose::DataOrder,
        &[model as u64, epoch as u64],
    ));
    let assignment = if hetero {
        hetero_assignment(base_seed, model)
    } else {
        HeteroAssignment::NONE
    };
    order
        .chunks(batch_size)
        .enumerate()
        .map(|(b, idx)| Batch {
            indices: idx.to_vec(),
            hetero: assignment,
            noise_key: [base_seed, model as u64, epoch as u64, b as u64],
        })
        .collect()
}

/// Fraction of argmax-correct predictions.
pub fn accuracy(params: &LayeredParams, spec: &NetSpec, split: &Split) -> Result<f64> {
    if split.is_empty() {
        return Err(invalid("accuracy on an empty split"));
    }
    let logits = forward(params, spec, &split.inputs)?;
    let hits = split
        .labels
        .iter()
        .enumerate()
        .filter(|(r, &y)| argmax(logits.row(*r)) == y)
        .count();
    Ok(hits as f64 / split.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_data(rows: usize, dim: usize, k: usize, seed: u64) -> BatchData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        BatchData {
            inputs: (0..rows * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
            labels: (0..rows).map(|_| rng.random_range(0..k)).collect(),
            label_smoothing: 0.0,
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_bias() {
        let spec = NetSpec::new(vec![10, 10, 3], Activation::Relu).unwrap();
        let a = init_params(&spec, 5);
        assert_eq!(a, init_params(&spec, 5));
        assert_ne!(a, init_params(&spec, 6));
        assert!(a.tensor(1).iter().chain(a.tensor(3)).all(|&b| b == 0.0));
        let bound = (6.0f64 / 20.0).sqrt();
        assert!(a.tensor(0).iter().all(|w| w.abs() <= bound));
        assert!(a.tensor(0).iter().any(|w| w.abs() > 0.5 * bound));
        assert_eq!(a.len(), spec.param_count());
    }

    #[test]
    fn spec_validation() {
        assert!(NetSpec::new(vec![4], Activation::Relu).is_err());
        assert!(NetSpec::new(vec![4, 1], Activation::Relu).is_err());
        assert!(NetSpec::new(vec![4, 0, 2], Activation::Relu).is_err());
        let s = NetSpec::new(vec![4, 8, 3], Activation::Tanh).unwrap();
        assert_eq!(s.param_count(), 8 * 5 + 3 * 9);
        assert_eq!(s.layout().num_layers(), 2);
    }

    #[test]
    fn uniform_logits_give_ln_k() {
        let spec = NetSpec::new(vec![3, 5, 4], Activation::Tanh).unwrap();
        let zero = LayeredParams::zeros(Arc::new(spec.layout()));
        let data = tiny_data(6, 3, 4, 1);
        let (loss, _) = loss_and_grad(&zero, &spec, &data).unwrap();
        assert!((loss - libm::log(4.0)).abs() < 1e-14);
    }

    #[test]
    fn duplicated_batch_keeps_mean_loss() {
        let spec = NetSpec::new(vec![3, 6, 3], Activation::Relu).unwrap();
        let p = init_params(&spec, 2);
        let data = tiny_data(5, 3, 3, 9);
        let mut twice = data.clone();
        twice.inputs.extend_from_slice(&data.inputs);
        twice.labels.extend_from_slice(&data.labels);
        let (a, ga) = loss_and_grad(&p, &spec, &data).unwrap();
        let (b, gb) = loss_and_grad(&p, &spec, &twice).unwrap();
        assert!((a - b).abs() < 1e-14);
        for (x, y) in ga.values().iter().zip(gb.values()) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    fn finite_difference_check(dims: Vec<usize>, act: Activation, smoothing: f64, seed: u64) {
        let spec = NetSpec::new(dims, act).unwrap();
        let mut p = init_params(&spec, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
        for v in p.values_mut() {
            *v += rng.random_range(-0.1..0.1);
        }
        let mut data = tiny_data(8, spec.input_dim(), spec.classes(), seed);
        data.label_smoothing = smoothing;
        let (_, g) = loss_and_grad(&p, &spec, &data).unwrap();
        let h = 1e-5;
        for i in 0..p.len() {
            let orig = p.values()[i];
            p.values_mut()[i] = orig + h;
            let (lp, _) = loss_and_grad(&p, &spec, &data).unwrap();
            p.values_mut()[i] = orig - h;
            let (lm, _) = loss_and_grad(&p, &spec, &data).unwrap();
            p.values_mut()[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let an = g.values()[i];
            let tol = 1e-4 * an.abs().max(fd.abs()) + 1e-6;
            assert!(
                (an - fd).abs() <= tol,
                "coord {i}: analytic {an} vs fd {fd}"
            );
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        finite_difference_check(vec![2, 16, 3], Activation::Tanh, 0.0, 1);
        finite_difference_check(vec![2, 16, 3], Activation::Relu, 0.0, 2);
        finite_difference_check(vec![4, 6, 5, 7, 3], Activation::Tanh, 0.1, 3);
    }

    #[test]
    fn non_finite_input_rejected() {
        let spec = NetSpec::new(vec![2, 3, 2], Activation::Relu).unwrap();
        let p = init_params(&spec, 0);
        let err = forward(&p, &spec, &[1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
        let out = forward(&p, &spec, &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!((out.rows, out.cols), (2, 2));
        assert!(out.data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn bad_labels_rejected() {
        let spec = NetSpec::new(vec![2, 3, 2], Activation::Relu).unwrap();
        let p = init_params(&spec, 0);
        let data = BatchData {
            inputs: vec![0.0, 0.0],
            labels: vec![2],
            label_smoothing: 0.0,
        };
        assert!(loss_and_grad(&p, &spec, &data).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
    }

    #[test]
    fn constant_model_on_balanced_data_is_chance() {
        let spec = NetSpec::new(vec![5, 4, 4], Activation::Relu).unwrap();
        let data = make_synthetic(&SyntheticSpec {
            seed: 1,
            classes: 4,
            dim: 5,
            n_per_class: 10,
            n_test_per_class: 10,
            spread: 1.0,
            modes_per_class: 1,
        })
        .unwrap();
        let zero = LayeredParams::zeros(Arc::new(spec.layout()));
        assert_eq!(accuracy(&zero, &spec, &data.test).unwrap(), 0.25);
    }

    #[test]
    fn random_nets_are_near_chance() {
        let data = make_synthetic(&SyntheticSpec {
            seed: 3,
            classes: 4,
            dim: 8,
            n_per_class: 10,
            n_test_per_class: 250,
            spread: 1.0,
            modes_per_class: 2,
        })
        .unwrap();
        let spec = NetSpec::new(vec![8, 16, 4], Activation::Relu).unwrap();
        let mean: f64 = (0..5)
            .map(|s| accuracy(&init_params(&spec, 100 + s), &spec, &data.test).unwrap())
            .sum::<f64>()
            / 5.0;
        assert!((mean - 0.25).abs() <= 0.1, "mean accuracy {mean}");
    }

    #[test]
    fn memorizer_scores_one() {
        // one-hot inputs mapped straight to their labels
        let spec = NetSpec::new(vec![3, 3], Activation::Relu).unwrap();
        let layout = Arc::new(spec.layout());
        let mut p = LayeredParams::zeros(layout);
        p.tensor_mut(0)
            .copy_from_slice(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let split = Split {
            inputs: vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
            labels: vec![0, 1, 2],
        };
        assert_eq!(accuracy(&p, &spec, &split).unwrap(), 1.0);
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let spec = SyntheticSpec {
            seed: 4,
            classes: 3,
            dim: 6,
            n_per_class: 20,
            n_test_per_class: 5,
            spread: 0.5,
            modes_per_class: 2,
        };
        let a = make_synthetic(&spec).unwrap();
        assert_eq!(a, make_synthetic(&spec).unwrap());
        assert_eq!(a.train.len(), 60);
        assert_eq!(a.test.len(), 15);
        for c in 0..3 {
            assert_eq!(a.train.labels.iter().filter(|&&y| y == c).count(), 20);
        }
        a.validate().unwrap();
    }

    #[test]
    fn validation_holdout_takes_two_percent() {
        let spec = SyntheticSpec {
            seed: 4,
            classes: 4,
            dim: 3,
            n_per_class: 250,
            n_test_per_class: 5,
            spread: 0.5,
            modes_per_class: 1,
        };
        let d = make_synthetic(&spec)
            .unwrap()
            .with_validation_holdout(0.02, 8)
            .unwrap();
        assert_eq!(d.val.len(), 20);
        assert_eq!(d.train.len(), 980);
        d.validate().unwrap();
    }

    #[test]
    fn streams_cover_every_example_once() {
        let a = make_heterogeneous_stream(103, 10, 0, 2, 9, false);
        let b = make_heterogeneous_stream(103, 10, 1, 2, 9, false);
        assert_eq!(a.len(), 11);
        let flat = |s: &[Batch]| s.iter().flat_map(|b| b.indices.clone()).collect::<Vec<_>>();
        let (fa, fb) = (flat(&a), flat(&b));
        assert_ne!(fa, fb);
        let (mut sa, mut sb) = (fa.clone(), fb.clone());
        sa.sort_unstable();
        sb.sort_unstable();
        assert_eq!(sa, (0..103).collect::<Vec<_>>());
        assert_eq!(sa, sb);
        assert_eq!(a, make_heterogeneous_stream(103, 10, 0, 2, 9, false));
        assert_ne!(a, make_heterogeneous_stream(103, 10, 0, 3, 9, false));
    }

    #[test]
    fn hetero_assignment_is_reproducible() {
        // re-derive from the documented rule: menus shuffled once, taken in order, cycled
        let seed = 31;
        let mut rng = stream(seed, Purpose::Hetero, &[]);
        let mut jit: Vec<usize> = (0..4).collect();
        let mut smo: Vec<usize> = (0..4).collect();
        jit.shuffle(&mut rng);
        smo.shuffle(&mut rng);
        for n in 0..10 {
            let got = make_heterogeneous_stream(20, 5, n, 0, seed, true)[0].hetero;
            assert_eq!(got.jitter_sigma, JITTER_MENU[jit[n % 4]]);
            assert_eq!(got.label_smoothing, SMOOTHING_MENU[smo[n % 4]]);
        }
        let sigmas: Vec<f64> = (0..4)
            .map(|n| hetero_assignment(seed, n).jitter_sigma)
            .collect();
        let mut sorted = sigmas.clone();
        sorted.sort_by(f64::total_cmp);
        assert_eq!(sorted, JITTER_MENU.to_vec());
        assert_eq!(
            make_heterogeneous_stream(20, 5, 2, 0, seed, false)[0].hetero,
            HeteroAssignment::NONE
        );
    }

    #[test]
    fn jitter_is_keyed_and_applied() {
        let split = Split {
            inputs: vec![0.0; 8],
            labels: vec![0, 1, 0, 1],
        };
        let b = Batch {
            indices: vec![0, 1],
            hetero: HeteroAssignment {
                jitter_sigma: 0.3,
                label_smoothing: 0.1,
            },
            noise_key: [1, 2, 3, 4],
        };
        let d1 = b.materialize(&split, 2);
        assert_eq!(d1, b.materialize(&split, 2));
        assert!(d1.inputs.iter().all(|&x| x != 0.0));
        assert_eq!(d1.labels, vec![0, 1]);
        assert_eq!(d1.label_smoothing, 0.1);
    }
}
