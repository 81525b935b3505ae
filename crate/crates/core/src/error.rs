use std::fmt;

use thiserror::Error;

/// Why a token sequence could not be rebuilt into an operation tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReconstructionReason {
    DanglingChildren,
    TrailingTokens,
    UnknownToken,
    MissingEos,
    ConstUnderflow,
}

impl fmt::Display for ReconstructionReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ReconstructionReason::DanglingChildren => "dangling-children",
            ReconstructionReason::TrailingTokens => "trailing-tokens",
            ReconstructionReason::UnknownToken => "unknown-token",
            ReconstructionReason::MissingEos => "missing-EOS",
            ReconstructionReason::ConstUnderflow => "const-underflow",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("cannot reconstruct tree: {reason} at position {position}")]
pub struct ReconstructionError {
    pub reason: ReconstructionReason,
    pub position: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("parse error at byte {offset}: expected one of {expected:?}")]
pub struct ParseError {
    pub offset: usize,
    pub expected: Vec<String>,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    Length { len: usize, max: usize },
    #[error(transparent)]
    Reconstruction(#[from] ReconstructionError),
    #[error("constant slot {0} is masked")]
    MaskedConst(usize),
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("only {finite} of {total} image entries are finite")]
    DegenerateImage { finite: usize, total: usize },
    #[error("cannot sample {requested} entries from a queue of capacity {capacity}")]
    Sample { requested: usize, capacity: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("condition width {got} does not match feature width {expected}")]
    CondWidth { got: usize, expected: usize },
    #[error("gradient check failed for tensors {0:?}")]
    GradCheckFailure(Vec<String>),
    #[error("cannot tokenize byte {byte:#04x} at offset {offset}")]
    Tokenize { offset: usize, byte: u8 },
    #[error("formula not present in teacher store: {0:?}")]
    MissingKey(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
    #[error("line search found no descent direction at the first iteration")]
    NoDescent,
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("prediction count {pred} does not match target count {target}")]
    LengthMismatch { pred: usize, target: usize },
    #[error("checkpoint version mismatch: {0}")]
    Version(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
