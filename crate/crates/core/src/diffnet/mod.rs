//! A small tape-based reverse-mode differentiation engine: tensors,
//! computation graphs with dense/conv/pool/elementwise nodes, a named
//! parameter store with Adam, and a finite-difference gradient check.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

use thiserror::Error;

pub use gradcheck::{grad_check, grad_check_with, relative_error, GradCheckReport, FD_STEP, MIN_SAMPLE, REL_FLOOR};
pub use graph::{backward, forward, Gradients, Graph, NodeId, Op, Tape};
pub use params::{Param, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("unknown node: {0}")]
    UnknownNode(String),
    #[error("non-finite value at {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DiffError>;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[cfg(test)]
mod tests;
