use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for extent {extent}")]
    OutOfRange {
        op: &'static str,
        index: usize,
        extent: usize,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any tensor that requires a gradient")]
    Detached,
    #[error("every position is masked")]
    AllMasked,
    #[error("sentence {0} has no unmasked tokens")]
    EmptySequence(usize),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("token {token} is outside the vocabulary of size {vocab}")]
    TokenOutOfVocab { token: usize, vocab: usize },
    #[error("parameter {name}: {reason}")]
    ParamMismatch { name: String, reason: String },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("training diverged at step {step}: cross-entropy {ce} exceeds {limit}")]
    Diverged { step: usize, ce: f64, limit: f64 },
    #[error("{0}")]
    Invalid(String),
}
