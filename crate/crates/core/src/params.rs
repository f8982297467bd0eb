//! Layered parameter containers and the population-level vector math built on
//! them: consensus mean, consensus distance, interpolation and weighted
//! averaging.
//!
//! Every tensor carries a layer index. The flat coordinate space is
//! layer-major, then row-major inside each tensor, and that mapping is shared
//! by shuffling, communication accounting and checkpoints.

use alloc::format;
use alloc::sync::Arc;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};

/// Shape metadata for one tensor in a [`Layout`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorMeta {
    pub layer: usize,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// The flat coordinate layout shared by every model of a population.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    tensors: Vec<TensorMeta>,
    /// `layer_ranges[l]` is the half-open flat range covered by layer `l`.
    layer_ranges: Vec<(usize, usize)>,
    len: usize,
}

impl Layout {
    /// Builds a layout from `(layer, shape)` pairs.
    ///
    /// Layer indices must be non-decreasing and contiguous from zero so that
    /// each layer occupies one contiguous flat range.
    pub fn new(tensors: &[(usize, Vec<usize>)]) -> Result<Self> {
        if tensors.is_empty() {
            return Err(invalid("layout needs at least one tensor"));
        }
        let mut metas = Vec::with_capacity(tensors.len());
        let mut layer_ranges: Vec<(usize, usize)> = Vec::new();
        let mut offset = 0;
        for (layer, dims) in tensors {
            let len: usize = dims.iter().product();
            match layer_ranges.len() {
                n if *layer == n => layer_ranges.push((offset, offset + len)),
                n if n > 0 && *layer == n - 1 => layer_ranges[n - 1].1 = offset + len,
                _ => {
                    return Err(invalid(format!(
                        "tensor layer {layer} breaks layer-major ordering"
                    )))
                }
            }
            metas.push(TensorMeta {
                layer: *layer,
                shape: dims.clone(),
                offset,
                len,
            });
            offset += len;
        }
        Ok(Self {
            tensors: metas,
            layer_ranges,
            len: offset,
        })
    }

    /// Single-layer layout with `d` scalars.
    pub fn flat(d: usize) -> Self {
        Self::new(&[(0, alloc::vec![d])]).expect("single tensor layout")
    }

    /// Total scalar count `d`.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_layers(&self) -> usize {
        self.layer_ranges.len()
    }

    pub fn tensors(&self) -> &[TensorMeta] {
        &self.tensors
    }

    /// Half-open flat range of layer `l`.
    pub fn layer_range(&self, l: usize) -> (usize, usize) {
        self.layer_ranges[l]
    }

    pub fn layer_len(&self, l: usize) -> usize {
        let (a, b) = self.layer_ranges[l];
        b - a
    }

    /// Layer containing flat coordinate `i`.
    pub fn layer_of(&self, i: usize) -> usize {
        debug_assert!(i < self.len);
        self.layer_ranges.partition_point(|&(_, end)| end <= i)
    }

    /// Maps a flat coordinate to `(tensor index, offset within tensor)`.
    pub fn locate(&self, i: usize) -> Option<(usize, usize)> {
        if i >= self.len {
            return None;
        }
        let t = self.tensors.partition_point(|m| m.offset + m.len <= i);
        Some((t, i - self.tensors[t].offset))
    }
}

/// Parameters of one model: a flat value buffer plus its shared layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredParams {
    layout: Arc<Layout>,
    values: Vec<f64>,
}

impl LayeredParams {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = alloc::vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(shape(format!(
                "{} values for a layout of {} scalars",
                values.len(),
                layout.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Values of tensor `t`.
    pub fn tensor(&self, t: usize) -> &[f64] {
        let m = &self.layout.tensors[t];
        &self.values[m.offset..m.offset + m.len]
    }

    pub fn tensor_mut(&mut self, t: usize) -> &mut [f64] {
        let m = &self.layout.tensors[t];
        &mut self.values[m.offset..m.offset + m.len]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || *self.layout == *other.layout
    }

    /// Squared Euclidean norm of `self - other`.
    pub fn dist_sq(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }
}

pub(crate) fn check_homogeneous(models: &[LayeredParams]) -> Result<()> {
    let first = models
        .first()
        .ok_or_else(|| invalid("population is empty"))?;
    for (n, m) in models.iter().enumerate().skip(1) {
        if !first.same_shape(m) {
            return Err(shape(format!("model {n} layout differs from model 0")));
        }
    }
    Ok(())
}

/// Coordinatewise mean of the population.
///
/// Computed as `θ_0 + Σ_n (θ_n − θ_0) / N` so that a population of identical
/// models yields that model bit for bit.
pub fn consensus_mean(models: &[LayeredParams]) -> Result<LayeredParams> {
    check_homogeneous(models)?;
    let mut out = models[0].clone();
    mean_into(models, out.values_mut());
    Ok(out)
}

pub(crate) fn mean_into(models: &[LayeredParams], out: &mut [f64]) {
    let n = models.len() as f64;
    let pivot = models[0].values();
    out.copy_from_slice(pivot);
    if models.len() == 1 {
        return;
    }
    for (i, o) in out.iter_mut().enumerate() {
        let p = pivot[i];
        let mut acc = 0.0;
        for m in &models[1..] {
            acc += m.values[i] - p;
        }
        *o = p + acc / n;
    }
}

/// Distance of a population to its consensus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsensusDistance {
    /// `Σ_n ‖θ_n − θ̄‖²`
    pub sum_sq: f64,
    /// `(1/N) Σ_n ‖θ_n − θ̄‖`
    pub avg_dist: f64,
}

pub fn consensus_distance(models: &[LayeredParams]) -> Result<ConsensusDistance> {
    let mean = consensus_mean(models)?;
    Ok(distance_to(models, &mean))
}

pub(crate) fn distance_to(models: &[LayeredParams], mean: &LayeredParams) -> ConsensusDistance {
    let mut sum_sq = 0.0;
    let mut sum_norm = 0.0;
    for m in models {
        let sq = m.dist_sq(mean);
        sum_sq += sq;
        sum_norm += libm::sqrt(sq);
    }
    ConsensusDistance {
        sum_sq,
        avg_dist: sum_norm / models.len() as f64,
    }
}

/// Result of [`interpolate`]; `extrapolated` is set when λ lies outside `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolated {
    pub params: LayeredParams,
    pub extrapolated: bool,
}

/// `(1−λ)a + λb`, coordinatewise.
///
/// The weights are formed as `wa = 1 − λ`, `wb = 1 − wa`, which makes
/// `interpolate(a, b, λ)` and `interpolate(b, a, 1 − λ)` bitwise equal.
pub fn interpolate(a: &LayeredParams, b: &LayeredParams, lambda: f64) -> Result<Interpolated> {
    if !a.same_shape(b) {
        return Err(shape("interpolation endpoints differ in layout"));
    }
    if !lambda.is_finite() {
        return Err(invalid("interpolation coefficient must be finite"));
    }
    let wa = 1.0 - lambda;
    let wb = 1.0 - wa;
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| wa * x + wb * y)
        .collect();
    Ok(Interpolated {
        params: LayeredParams {
            layout: a.layout.clone(),
            values,
        },
        extrapolated: !(0.0..=1.0).contains(&lambda),
    })
}

/// `Σ_k w_k θ_k`. The weights must sum to one within `1e-12`.
pub fn weighted_average(models: &[LayeredParams], weights: &[f64]) -> Result<LayeredParams> {
    check_homogeneous(models)?;
    if weights.len() != models.len() {
        return Err(invalid(format!(
            "{} weights for {} models",
            weights.len(),
            models.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if !total.is_finite() || libm::fabs(total - 1.0) > 1e-12 {
        return Err(invalid(format!("weights sum to {total}, expected 1")));
    }
    let mut out = LayeredParams::zeros(models[0].layout.clone());
    for (m, &w) in models.iter().zip(weights) {
        for (o, v) in out.values.iter_mut().zip(&m.values) {
            *o += w * v;
        }
    }
    Ok(out)
}
