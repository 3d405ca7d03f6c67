//! Synthetic data, training, evaluation, ablation and gradient checks for
//! `consformer`, plus the file formats the `consformer` binary reads and
//! writes.

pub mod ablate;
pub mod config;
pub mod data;
mod error;
pub mod gradcheck;
pub mod synth;
pub mod train;

pub use error::{HarnessError, Result};
