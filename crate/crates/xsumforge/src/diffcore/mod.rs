//! Reverse-mode automatic differentiation over float64 tensors.
//!
//! Operations are recorded on a [`Tape`]; [`Tape::backward`] walks the record
//! in reverse and accumulates gradients for every gradient-requiring leaf
//! reachable from the loss. One tape per training step; tapes are
//! single-threaded.

mod tape;
mod tensor;

pub use tape::{log_softmax, NodeId, PadMode, Tape};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("{op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("glu input width {0} is odd")]
    OddWidth(usize),
    #[error("index {index} out of vocabulary of size {vocab}")]
    IndexOutOfVocab { index: usize, vocab: usize },
    #[error("tensor does not belong to this tape")]
    DetachedTensor,
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidDropout(f64),
    #[error("backward target is not a scalar")]
    NotScalar,
    #[error("cross-entropy has no unmasked targets")]
    NoLiveTargets,
}

pub type Result<T> = std::result::Result<T, DiffError>;

fn shape_err(op: &'static str, detail: String) -> DiffError {
    DiffError::ShapeMismatch { op, detail }
}
