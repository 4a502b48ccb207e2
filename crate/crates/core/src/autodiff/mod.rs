//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every primitive application during a forward pass;
//! [`Tape::backward`] replays the record in reverse to populate gradients.
//! The primitive set is closed and intentionally small: exactly what GRU
//! cells, attention, softmax classifiers and the training losses need.

mod gradcheck;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use optim::{optimizer_step, Sgd, UpdateRule};
pub use tape::{Primitive, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

/// Errors raised by tape construction, backpropagation and updates.
#[derive(Debug, Error)]
pub enum AutodiffError {
    /// Input shapes do not conform to the primitive's signature.
    #[error("{primitive}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        primitive: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A primitive was applied with the wrong number of inputs.
    #[error("{primitive}: expected {expected} input(s), got {got}")]
    Arity {
        primitive: &'static str,
        expected: usize,
        got: usize,
    },

    /// A completed operation produced a NaN or infinite value.
    #[error("{context}: non-finite value produced")]
    NonFinite { context: String },

    /// `backward` was called on a tensor that is not a scalar.
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    /// A variable from one tape was used on another.
    #[error("{primitive}: input belongs to a different tape")]
    TapeMismatch { primitive: &'static str },

    /// Embedding lookup outside the table.
    #[error("embedding-lookup: row {id} out of range for table with {rows} rows")]
    EmbedOutOfRange { id: usize, rows: usize },

    /// An update was requested for a parameter with no gradient.
    #[error("optimizer step: parameter {index} has no gradient")]
    MissingGrad { index: usize },

    /// Invalid optimizer hyperparameter.
    #[error("optimizer step: {0}")]
    InvalidHyper(String),

    /// Tensor construction with inconsistent shape/value lengths.
    #[error("tensor shape {shape:?} implies {expected} values, got {got}")]
    BadShape {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },

    /// The function under `grad_check` returned different values for
    /// identical inputs.
    #[error("grad check: function is not deterministic ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },
}
