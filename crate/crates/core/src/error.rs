use std::path::PathBuf;

use crate::gridworld::ObjectClass;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error("environment generation failed after {attempts} attempts: {reason}")]
    GenerationFailed { attempts: usize, reason: String },

    #[error("invalid map: {0}")]
    InvalidMap(String),

    #[error("no instance of {0} in environment")]
    MissingClass(ObjectClass),

    #[error("goal unreachable from node {0}")]
    Unreachable(usize),

    #[error("no start node satisfies the constraints for {0}")]
    NoValidStart(ObjectClass),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("index {index} out of range for {len} branches")]
    BranchIndex { index: usize, len: usize },

    #[error("operation `{op}` is not available for scheme {scheme}")]
    Scheme { op: &'static str, scheme: String },

    #[error("invalid bank: {0}")]
    Bank(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("training diverged at iteration {iteration}: {detail}")]
    Diverged { iteration: usize, detail: String },

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input rather than data or runtime
    /// failures.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidParams(_) | Error::Config(_) | Error::Bank(_) | Error::Scheme { .. }
        )
    }
}
