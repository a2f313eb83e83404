//! Dense `f64` tensors and a tape-based reverse-mode differentiator.
//!
//! There is no randomness in this module: dropout is expressed as a product
//! with a mask tensor supplied by the caller.

mod check;
mod tape;
mod tensor;

pub use check::{check_gradients, GradCheckReport};
pub use tape::{softmax_values, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    Rank {
        op: &'static str,
        shape: Vec<usize>,
        expected: usize,
    },
    #[error("{op}: axis {axis} invalid for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("contract violation: {0}")]
    Contract(String),
}
