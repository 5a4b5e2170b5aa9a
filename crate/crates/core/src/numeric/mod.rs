//! Dense `f64` tensors, a reverse-mode autodiff tape, Adam, checkpoints and a
//! finite-difference gradient checker.

mod adam;
mod checkpoint;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
pub use tape::{cross_entropy_row, BackwardFn, GradientSet, Tape, Var, LAYER_NORM_EPS, PROB_CLIP};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("backward already ran on this tape")]
    TapeConsumed,
    #[error("variable {0} is not on this tape")]
    UnknownVar(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A named tensor with a trainability flag.
#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub requires_grad: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, value: Tensor, requires_grad: bool) -> Self {
        Self {
            name: name.into(),
            value,
            requires_grad,
        }
    }
}
