//! Population training with pluggable coordination: independent training,
//! EMA pulls toward the consensus, periodic full averaging, and stochastic
//! parameter shuffling across models (optionally with optimizer state).
//!
//! The crate is `no_std` + `alloc`. File formats, threads and the command line
//! live in the `wash` companion crate.
#![cfg_attr(not(test), no_std)]
#![allow(clippy::needless_range_loop)]
extern crate alloc;

pub mod coordination;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod optim;
pub mod params;
pub mod population;
pub mod rng;
pub mod toy2d;

pub use error::{Error, Result};
pub use params::{ConsensusDistance, LayeredParams, Layout};
