use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("degenerate vector: L2 norm {norm:e} is not above {eps:e}")]
    DegenerateVector { norm: f64, eps: f64 },

    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("label {label} is out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },

    #[error("cycle in hierarchy: {}", witness.join(" -> "))]
    Cycle { witness: Vec<String> },

    #[error("hierarchy has multiple roots: {}", roots.join(", "))]
    Forest { roots: Vec<String> },

    #[error("duplicate edge {parent} -> {child} (line {line})")]
    DuplicateEdge {
        parent: String,
        child: String,
        line: usize,
    },

    #[error("node {child} has more than one parent ({first}, {second})")]
    MultipleParents {
        child: String,
        first: String,
        second: String,
    },

    #[error("unknown class: {0}")]
    UnknownClass(String),

    #[error("degenerate hierarchy: {0}")]
    DegenerateHierarchy(String),

    #[error(
        "similarity matrix is not positive semidefinite at class {class} (residual {residual:e})"
    )]
    NotPsd { class: String, residual: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("schedule: epoch {epoch} is beyond the end of a {total}-epoch schedule")]
    ScheduleEnd { epoch: usize, total: usize },

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error("{path}: line {line}: {message}")]
    Format {
        path: String,
        line: usize,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Shape {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input (files, flags, configs) rather than numerics.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NonFinite { .. } | Error::Divergence(_) | Error::DegenerateVector { .. }
        )
    }
}
