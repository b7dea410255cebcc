use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("loss has no unmasked positions")]
    EmptyLoss,
    #[error("target id {target} is outside a vocabulary of {vocab}")]
    Vocabulary { target: usize, vocab: usize },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("backward already ran on this graph")]
    BackwardTwice,
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("image of {rows}x{cols} is not divisible into {patch}x{patch} patches")]
    Patching {
        rows: usize,
        cols: usize,
        patch: usize,
    },
    #[error("index {index} out of range for {what} of size {len}")]
    OutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },
    #[error("sequence of length {len} exceeds the budget of {max}")]
    SequenceLength { len: usize, max: usize },
    #[error("codebook fit needs at least {needed} distinct samples, found {found}")]
    TooFewSamples { needed: usize, found: usize },
    #[error("generation budget exhausted before the image block closed ({} tokens emitted)", partial.len())]
    Truncated { partial: Vec<usize> },
    #[error("stage mask violated: {0}")]
    MaskViolation(String),
    #[error("check failed: {0}")]
    Check(String),
    #[error("{0}")]
    Io(String),
}
