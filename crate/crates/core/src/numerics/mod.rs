//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a single-use tape: build the forward computation, call
//! [`Graph::backward`] once on a scalar, read gradients. Parameters live in a
//! [`ParamStore`] and are copied onto each graph as leaves.

mod checkpoint;
mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

use thiserror::Error;

pub use checkpoint::{decode as decode_checkpoint, encode as encode_checkpoint};
pub use checkpoint::{load as load_checkpoint, save as save_checkpoint};
pub use gradcheck::{grad_check, grad_check_many, op_suite, OP_NAMES};
pub use graph::{Graph, Var};
pub use optim::{adam_step, step_lr, AdamConfig, AdamState};
pub use params::{Bound, Linear, ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} does not match {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("{0}")]
    Domain(String),
    #[error("backward already ran on this graph; rebuild the forward pass")]
    BackwardTwice,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[cfg(test)]
mod tests;
