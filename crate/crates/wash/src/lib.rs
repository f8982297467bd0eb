//! Command line, file formats and threaded execution around `wash-core`.
//!
//! The binary exposes `train`, `sweep`, `report`, `resume`, `toy2d` and
//! `gen-data`; every subcommand is also callable from [`commands`].

pub mod commands;
pub mod config;
pub mod error;
pub mod exec;
pub mod formats;

pub use config::Manifest;
pub use error::{CliError, Result};
pub use exec::Threaded;
pub use wash_core as core;
