//! SGD with heavy-ball momentum, folded weight decay and a cosine-annealed
//! learning rate.

use core::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::LayeredParams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptHyper {
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_max: f64,
    pub lr_min: f64,
}

impl Default for OptHyper {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_max: 0.1,
            lr_min: 1e-4,
        }
    }
}

impl OptHyper {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..1.0).contains(&self.momentum)
            && self.weight_decay >= 0.0
            && self.lr_min >= 0.0
            && self.lr_max >= self.lr_min
            && self.lr_max.is_finite();
        if ok {
            Ok(())
        } else {
            Err(crate::error::invalid(
                "optimizer needs momentum in [0,1), wd >= 0, 0 <= lr_min <= lr_max",
            ))
        }
    }
}

/// `η(t) = η_min + ½(η_max − η_min)(1 + cos(π t / T))`; steps past `T`
/// clamp to `η_min`.
pub fn cosine_lr(t: usize, total: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total == 0 || t >= total {
        return lr_min;
    }
    let frac = t as f64 / total as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + libm::cos(PI * frac))
}

/// Momentum buffer of one model, shaped like its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState {
    pub momentum: LayeredParams,
}

impl OptState {
    pub fn new(params: &LayeredParams) -> Self {
        Self {
            momentum: LayeredParams::zeros(params.layout().clone()),
        }
    }
}

/// `g' = g + wd·θ; v ← μ·v + g'; θ ← θ − lr·v`.
///
/// A non-finite gradient entry aborts the step before anything is modified.
pub fn sgd_step(
    params: &mut LayeredParams,
    grads: &LayeredParams,
    state: &mut OptState,
    hyper: &OptHyper,
    lr: f64,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.momentum) {
        return Err(crate::error::shape("sgd step operands differ in layout"));
    }
    if let Some(i) = grads.values().iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            what: "gradient",
            index: i,
        });
    }
    let (mu, wd) = (hyper.momentum, hyper.weight_decay);
    let v = state.momentum.values_mut();
    for ((theta, g), vi) in params.values_mut().iter_mut().zip(grads.values()).zip(v) {
        let g = g + wd * *theta;
        *vi = mu * *vi + g;
        *theta -= lr * *vi;
    }
    Ok(())
}
