use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numeric core and the algorithms built on it.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch for {operand}: expected {expected}, got {got:?}")]
    Shape {
        operand: &'static str,
        expected: String,
        got: Vec<usize>,
    },
    #[error("degenerate vector")]
    DegenerateVector,
    #[error("target {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("gradient requested for a non-scalar output of shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("degenerate batch: {0}")]
    DegenerateBatch(&'static str),
    #[error("empty frame")]
    EmptyFrame,
    #[error("no overlap between silhouette and depth")]
    NoOverlap,
    #[error("empty sequence")]
    EmptySequence,
    #[error("no variant probes")]
    NoVariantProbes,
    #[error("invalid argument: {0}")]
    Invalid(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn shape_err(operand: &'static str, expected: impl Into<String>, got: &[usize]) -> Error {
    Error::Shape {
        operand,
        expected: expected.into(),
        got: got.to_vec(),
    }
}
