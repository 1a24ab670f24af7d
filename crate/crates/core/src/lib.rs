//! Contiguous layer pruning for decoder-only transformers.
//!
//! The pipeline: train (or load) a dense model, search the start of an
//! `n`-layer window with a differentiable concave gate by minimising the KL
//! divergence between dense and gated outputs, excise that window, then
//! recover quality by fine-tuning only the two layers adjacent to the cut.
//! A brute-force window oracle provides ground truth for the search.

pub mod autograd;
pub mod calibrate;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod functional;
pub mod gate;
pub mod model;
pub mod optim;
pub mod oracle;
pub mod pipeline;
pub mod prune;
pub mod tensor;
pub mod train;
pub mod tune;

pub use error::{ClpError, ErrorKind, Result};
pub use tensor::{Real, Tensor};
