use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("rank {rank} exceeds the supported maximum of 3")]
    Rank { rank: usize },

    #[error("softmax row {row} has every position masked")]
    DegenerateRow { row: usize },

    #[error("{op}: input {value} is outside the domain (must be > 0)")]
    Domain { op: &'static str, value: f64 },

    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("{what}: index {index} out of range for length {len}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("unknown parameter `{0}`")]
    UnknownParam(String),

    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),

    #[error("{what} must not be empty")]
    Empty { what: &'static str },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
