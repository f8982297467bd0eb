//! Evaluating a trained population: prediction ensembles, the uniformly
//! averaged model, greedy soups, interpolation grids and consensus telemetry.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::coordination::CommLedger;
use crate::error::{invalid, Result};
use crate::nn::{accuracy, argmax, forward, softmax_in_place, Dataset, NetSpec, Split};
use crate::params::{consensus_distance, consensus_mean, interpolate, LayeredParams};

/// How member predictions are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnsembleMode {
    /// Average post-softmax probabilities.
    #[default]
    Probabilities,
    Logits,
}

/// Accuracy of the prediction-averaged ensemble; ties go to the lowest class.
pub fn ensemble_accuracy(
    models: &[LayeredParams],
    spec: &NetSpec,
    split: &Split,
    mode: EnsembleMode,
) -> Result<f64> {
    if models.is_empty() || split.is_empty() {
        return Err(invalid("ensemble needs models and a non-empty split"));
    }
    let k = spec.classes();
    let mut total = vec![0.0; split.len() * k];
    for m in models {
        let mut logits = forward(m, spec, &split.inputs)?;
        for row in logits.data.chunks_exact_mut(k) {
            if mode == EnsembleMode::Probabilities {
                softmax_in_place(row);
            }
        }
        for (t, v) in total.iter_mut().zip(&logits.data) {
            *t += v;
        }
    }
    Ok(hit_rate(&total, &split.labels, k))
}

fn hit_rate(scores: &[f64], labels: &[usize], k: usize) -> f64 {
    let hits = scores
        .chunks_exact(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    hits as f64 / labels.len() as f64
}

/// The uniform soup: every model weighted `1/N`.
pub fn averaged_model(models: &[LayeredParams]) -> Result<LayeredParams> {
    consensus_mean(models)
}

/// Acceptance rule for adding an ingredient to the soup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoupKeep {
    /// Keep when validation accuracy does not drop.
    #[default]
    NonStrict,
    /// Keep only when validation accuracy improves.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GreedySoup {
    /// Model indices in the order they entered the soup.
    pub subset: Vec<usize>,
    pub val_acc: f64,
    pub test_acc: f64,
}

/// Greedy soup: visit models by descending validation accuracy (ties by
/// index), start from the best, and keep each next model if the uniform
/// average of the soup plus that model scores at least as well on validation.
pub fn greedy_soup(
    models: &[LayeredParams],
    spec: &NetSpec,
    val: &Split,
    test: &Split,
    keep: SoupKeep,
) -> Result<GreedySoup> {
    if val.is_empty() {
        return Err(invalid("greedy soup needs a non-empty validation split"));
    }
    if models.is_empty() {
        return Err(invalid("greedy soup needs at least one model"));
    }
    let val_accs = models
        .iter()
        .map(|m| accuracy(m, spec, val))
        .collect::<Result<Vec<_>>>()?;
    let mut order: Vec<usize> = (0..models.len()).collect();
    order.sort_by(|&a, &b| val_accs[b].total_cmp(&val_accs[a]).then(a.cmp(&b)));

    let mut subset = vec![order[0]];
    let mut members = vec![models[order[0]].clone()];
    let mut soup = members[0].clone();
    let mut best = val_accs[order[0]];
    for &cand in &order[1..] {
        members.push(models[cand].clone());
        let trial = consensus_mean(&members)?;
        let acc = accuracy(&trial, spec, val)?;
        let accept = match keep {
            SoupKeep::NonStrict => acc >= best,
            SoupKeep::Strict => acc > best,
        };
        if accept {
            subset.push(cand);
            soup = trial;
            best = acc;
        } else {
            members.pop();
        }
    }
    Ok(GreedySoup {
        subset,
        val_acc: best,
        test_acc: accuracy(&soup, spec, test)?,
    })
}

/// Accuracy of `interpolate(a, b, λ)` for each λ.
pub fn interpolation_sweep(
    a: &LayeredParams,
    b: &LayeredParams,
    spec: &NetSpec,
    lambdas: &[f64],
    split: &Split,
) -> Result<Vec<f64>> {
    lambdas
        .iter()
        .map(|&l| accuracy(&interpolate(a, b, l)?.params, spec, split))
        .collect()
}

/// `grid[a][b]` is the accuracy of `(1−λ)θ_a + λθ_b`. The diagonal holds the
/// per-model accuracies.
pub fn interpolation_grid(
    models: &[LayeredParams],
    spec: &NetSpec,
    lambda: f64,
    split: &Split,
) -> Result<Vec<Vec<f64>>> {
    let n = models.len();
    let mut grid = vec![vec![0.0; n]; n];
    for a in 0..n {
        for b in 0..n {
            grid[a][b] = if a == b {
                accuracy(&models[a], spec, split)?
            } else {
                accuracy(
                    &interpolate(&models[a], &models[b], lambda)?.params,
                    spec,
                    split,
                )?
            };
        }
    }
    Ok(grid)
}

/// One telemetry row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub avg_consensus_dist: f64,
    pub sum_sq_dist: f64,
    pub comm_scalars_cum: u64,
    pub comm_scalars_effective_cum: u64,
}

pub fn telemetry_hook(
    models: &[LayeredParams],
    step: usize,
    lr: f64,
    mean_loss: f64,
    ledger: &CommLedger,
) -> Result<MetricsRecord> {
    let d = consensus_distance(models)?;
    Ok(MetricsRecord {
        step,
        lr,
        mean_loss,
        avg_consensus_dist: d.avg_dist,
        sum_sq_dist: d.sum_sq,
        comm_scalars_cum: ledger.scalars_nominal,
        comm_scalars_effective_cum: ledger.scalars_effective,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub ensemble: EnsembleMode,
    pub soup_keep: SoupKeep,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ensemble: EnsembleMode::Probabilities,
            soup_keep: SoupKeep::NonStrict,
        }
    }
}

/// Test-split evaluation of a population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ensemble_acc: f64,
    pub averaged_acc: f64,
    /// Present when the dataset has a validation split.
    pub greedy_soup: Option<GreedySoup>,
    pub best_model_acc: f64,
    pub worst_model_acc: f64,
    pub per_model_acc: Vec<f64>,
}

pub fn evaluate(
    models: &[LayeredParams],
    spec: &NetSpec,
    data: &Dataset,
    opts: &EvalOptions,
) -> Result<EvalSummary> {
    let test = &data.test;
    let per_model_acc = models
        .iter()
        .map(|m| accuracy(m, spec, test))
        .collect::<Result<Vec<_>>>()?;
    let best = per_model_acc
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let worst = per_model_acc.iter().copied().fold(f64::INFINITY, f64::min);
    let greedy_soup = if data.val.is_empty() {
        None
    } else {
        Some(greedy_soup(models, spec, &data.val, test, opts.soup_keep)?)
    };
    Ok(EvalSummary {
        ensemble_acc: ensemble_accuracy(models, spec, test, opts.ensemble)?,
        averaged_acc: accuracy(&averaged_model(models)?, spec, test)?,
        greedy_soup,
        best_model_acc: best,
        worst_model_acc: worst,
        per_model_acc,
    })
}
