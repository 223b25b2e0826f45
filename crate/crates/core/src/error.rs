use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for size {size}")]
    Index {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: non-finite value encountered")]
    NonFinite { op: &'static str },
    #[error("target is not a probability distribution: {0}")]
    Distribution(String),
    #[error("schema error: {0}")]
    Schema(String),
    #[error("degenerate attribute `{0}`: all values identical (use a categorical attribute or drop it)")]
    DegenerateAttribute(String),
    #[error("unknown row type {0}")]
    UnknownRowType(u32),
    #[error("sequence length error: {0}")]
    Length(String),
    #[error("cannot balance classes: {0}")]
    Balance(String),
    #[error("metric `{0}` is undefined for this input")]
    UndefinedMetric(&'static str),
    #[error("empty input to {0}")]
    Empty(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("task mismatch: {0}")]
    Task(String),
    #[error("output error: {0}")]
    Io(String),
}
