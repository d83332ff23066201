use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("value {value} at index {index} is not a legal code for {encoding} encoding")]
    InvalidCode {
        index: usize,
        value: f64,
        encoding: &'static str,
    },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("encoding mismatch: {0}")]
    EncodingMismatch(&'static str),
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite input at index {index}")]
    NonFinite { index: usize },
    #[error("invalid quantizer spec: {0}")]
    InvalidSpec(String),
    #[error("zero scale in unit {unit}")]
    ZeroScale { unit: usize },
    #[error("tensor `{0}` is not registered in the hybrid policy")]
    UnregisteredTensor(String),
    #[error("static spec for `{0}` has no frozen parameters")]
    Unfrozen(String),
    #[error("calibration set is empty but `{0}` was never trained")]
    EmptyCalibration(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("stage invariant violated: {0}")]
    StageViolation(String),
    #[error("attention row {row} sums to {sum}, not 1")]
    NotNormalized { row: usize, sum: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, expected: impl ToString, got: impl ToString) -> Error {
    Error::ShapeMismatch {
        op,
        expected: expected.to_string(),
        got: got.to_string(),
    }
}
