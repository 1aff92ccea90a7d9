//! Error type shared by all modules of the core crate.

use alloc::string::String;
use alloc::vec::Vec;

/// Errors produced by tensor operations, training loops, attacks, and
/// analysis routines.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    /// Shapes of the operands are incompatible with the operation.
    #[error("{op}: incompatible shapes {shapes:?}")]
    ShapeMismatch {
        op: &'static str,
        shapes: Vec<Vec<usize>>,
    },

    /// Operation called with the wrong number of inputs.
    #[error("{op}: expected {expected} inputs, got {got}")]
    ArityMismatch {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    /// An operation produced a NaN or infinite value.
    #[error("{op}: non-finite value ({context})")]
    NonFinite { op: &'static str, context: String },

    /// `backward` called on a tensor that is not a scalar.
    #[error("backward root must be a scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    /// `backward` called on a tensor that was explicitly detached from
    /// the computation.
    #[error("backward called on a detached tensor")]
    DetachedRoot,

    /// Token id outside the embedding table.
    #[error("token id {id} at position {position} of sample {sample} exceeds vocabulary size {vocab}")]
    OutOfVocab {
        id: usize,
        position: usize,
        sample: usize,
        vocab: usize,
    },

    /// Class label outside the model's output range.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// An input collection that must be non-empty was empty.
    #[error("empty {what}")]
    Empty { what: &'static str },

    /// A closed-form denominator came out zero.
    #[error("degenerate denominator in {what}")]
    Degenerate { what: &'static str },

    /// Requested tag has no activation records.
    #[error("tag {tag} absent from activation records")]
    TagNotFound { tag: usize },

    /// The adversarial inner loop hit a NaN/Inf gradient.
    #[error("non-finite gradient at inner step {step}")]
    NonFiniteGradient { step: usize },

    /// Training loss exploded or went non-finite.
    #[error("training diverged at epoch {epoch}, batch {batch}: loss {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },

    /// Invalid configuration value.
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = core::result::Result<T, Error>;
