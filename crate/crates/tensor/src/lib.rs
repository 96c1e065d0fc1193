//! Dense `f32`/`f64` matrices with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every minibatch. Forward values are computed
//! eagerly as ops are recorded and never mutated afterwards; [`Graph::backward`]
//! walks the record in reverse and returns a fresh [`Gradients`] table.
//!
//! Besides the usual dense ops the graph supports unsorted segment reductions
//! ([`Graph::segment_sum`], [`Graph::segment_max`], [`Graph::segment_softmax`]),
//! which let variable-length candidate lists from a whole minibatch be scored in
//! one flat tensor without padding.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod scalar;
mod segment;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId};
pub use optim::{clip_global_norm, Adam};
pub use params::{ParamId, ParamStore};
pub use scalar::Scalar;
pub use segment::SegmentIndex;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: [usize; 2],
        rhs: [usize; 2],
    },
    #[error("buffer of length {len} does not fit shape {shape:?}")]
    BadBuffer { shape: [usize; 2], len: usize },
    #[error("{op}: index {index} out of bounds for {bound}")]
    Index {
        op: &'static str,
        index: usize,
        bound: usize,
    },
    #[error("backward needs a 1x1 loss, got {shape:?}")]
    NonScalarLoss { shape: [usize; 2] },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
