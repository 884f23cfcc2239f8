use std::path::{Path, PathBuf};

/// Failures of the std layer. Every variant maps onto one process exit code.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("{}: byte {offset}: {reason}", path.display())]
    Format { path: PathBuf, offset: u64, reason: String },

    #[error("config: {0}")]
    Config(String),

    #[error("stale artifact {}: {reason}", path.display())]
    Stale { path: PathBuf, reason: String },

    #[error("{}: {source}", path.display())]
    Json { path: PathBuf, source: serde_json::Error },

    #[error("{}: line {line}: {reason}", path.display())]
    Csv { path: PathBuf, line: u64, reason: String },

    #[error(transparent)]
    Core(#[from] dmc_core::Error),

    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Error::Io { path: path.to_path_buf(), source }
    }

    pub fn format(path: &Path, offset: u64, reason: impl Into<String>) -> Self {
        Error::Format { path: path.to_path_buf(), offset, reason: reason.into() }
    }

    pub fn stale(path: &Path, reason: impl Into<String>) -> Self {
        Error::Stale { path: path.to_path_buf(), reason: reason.into() }
    }

    /// 1 generic, 2 I/O (including unreadable or malformed files),
    /// 3 validation, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Format { .. } | Error::Json { .. } | Error::Csv { .. } => 2,
            Error::Config(_) | Error::Stale { .. } => 3,
            Error::Core(e) if e.is_numeric() => 4,
            Error::Core(_) => 3,
            Error::Other(_) => 1,
        }
    }
}
