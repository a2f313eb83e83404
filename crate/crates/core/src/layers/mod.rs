//! Embedding, GRU and Bayesian GRU encoders, additive attention pooling.
//!
//! Layers are pure functions of (inputs, parameters, masks). Parameters
//! live in a [`ParamStore`] and are bound onto a tape per forward pass.

mod attention;
mod gru;
mod params;

pub use attention::{
    attention_pool, attention_pool_batch, embed, AttentionParams, AttentionVars, Linear, Pooled,
};
pub use gru::{
    bayesian_gru_encode, gru_cell, gru_encode, gru_encode_batch, sample_locked_masks, BatchMasks,
    GruParams, GruVars, LockedMasks, MaskTrace, Mode, StepTrace,
};
pub use params::{Bindings, ParamId, ParamStore};

use thiserror::Error;

use crate::autodiff::TensorError;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("dropout rate must lie in [0, 1), got {0}")]
    Rate(f64),
    #[error("{0}")]
    Shape(String),
}
