//! Minimal reverse-mode differentiable array computation: dense f64
//! tensors, a Wengert tape with the primitives the transformer and losses
//! need, the Adam optimizer, and a round-trip-stable checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{op}: domain violation: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },
    #[error("{op}: {detail}")]
    InvalidArg { op: &'static str, detail: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}
