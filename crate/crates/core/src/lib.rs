//! Constituent-gated self-attention for scene-text token sequences.
//!
//! Adjacent tokens are scored with a bilinear form, turned into link
//! probabilities, and accumulated into a span matrix `C` whose entry `(i, j)`
//! is the probability that tokens `i..=j` form one constituent. Attention
//! scores are gated elementwise by `C`.
//!
//! Everything runs on a small `f64` reverse-mode tape in [`numerics`].

pub mod attention;
pub mod constituent;
pub mod embeddings;
mod error;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod optim;

pub use error::{Error, Result};
