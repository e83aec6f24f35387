use thiserror::Error;

/// Errors surfaced by the estimation library.
///
/// `Infeasible` is special: estimation objectives map it to a `-inf`
/// objective value so that line searches back off, while every other
/// variant aborts the computation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("topology error: {0}")]
    Topology(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("destination node {0} has no incoming links")]
    IsolatedDestination(String),

    #[error("infeasible parameter point: {0}")]
    Infeasible(String),

    #[error("value solve failed (dest node {dest}): {reason}")]
    ValueSolve { dest: usize, reason: String },

    #[error("linear solve failed: {0}")]
    LinearSolve(String),

    #[error("link {0} is pruned for this destination")]
    PrunedLink(usize),

    #[error("path enumeration exceeded {cap} paths")]
    EnumerationOverflow { cap: usize },

    #[error("unconnected pair ({u} -> {v}) could not be sampled: {reason}")]
    Unsampleable { u: usize, v: usize, reason: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error means "this parameter point is outside the
    /// feasible region" rather than "the computation is broken".
    pub fn is_infeasible(&self) -> bool {
        matches!(
            self,
            Error::Infeasible(_) | Error::ValueSolve { .. } | Error::PrunedLink(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
