use std::path::PathBuf;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("missing input {path}: {hint}")]
    Missing { path: PathBuf, hint: &'static str },

    #[error("{0}")]
    Runtime(String),

    #[error(transparent)]
    Core(#[from] sitfuse::Error),
}

impl CliError {
    /// 2 for usage and configuration errors, 3 for runtime and data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_usage() => 2,
            _ => 3,
        }
    }
}
