use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, GrimError>;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, Error)]
pub enum GrimError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("index error: {0}")]
    Index(String),

    #[error("divisibility error: {0}")]
    Divisibility(String),

    #[error("alpha must lie in [0, 1), got {0}")]
    Alpha(f64),

    #[error("not a permutation: {0}")]
    Perm(String),

    #[error("consistency error: {0}")]
    Consistency(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("{line}:{column}: parse error: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("{line}:{column}: unknown op `{op}`")]
    UnknownOp { line: usize, column: usize, op: String },

    #[error("{line}:{column}: undefined tensor `{name}`")]
    DanglingTensor {
        line: usize,
        column: usize,
        name: String,
    },

    #[error("missing input `{0}`")]
    MissingInput(String),

    #[error("missing weights for tensor `{0}`")]
    MissingWeights(String),

    #[error("node `{node}`: {message}")]
    Node { node: String, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("tuning space is empty: {0}")]
    EmptySpace(String),

    #[error("no block-size candidate divides {rows}x{cols}")]
    NoCandidate { rows: usize, cols: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl GrimError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        GrimError::Shape(msg.into())
    }

    /// I/O error that names the file involved, keeping the error kind.
    pub(crate) fn io_at(path: &std::path::Path, e: io::Error) -> Self {
        GrimError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
    }

    /// Wraps an error with the name of the graph node that raised it.
    pub fn at_node(self, node: &str) -> Self {
        match self {
            e @ GrimError::Node { .. } => e,
            other => GrimError::Node {
                node: node.to_string(),
                message: other.to_string(),
            },
        }
    }

    /// True for errors caused by bad user input (malformed files, invalid
    /// flags, impossible shapes) rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            GrimError::Parse { .. }
            | GrimError::UnknownOp { .. }
            | GrimError::DanglingTensor { .. }
            | GrimError::Divisibility(_)
            | GrimError::Alpha(_)
            | GrimError::MissingInput(_)
            | GrimError::MissingWeights(_)
            | GrimError::Format(_)
            | GrimError::Config(_)
            | GrimError::NoCandidate { .. }
            | GrimError::EmptySpace(_)
            | GrimError::Data(_) => true,
            GrimError::Io(e) => e.kind() == io::ErrorKind::NotFound,
            _ => false,
        }
    }
}
