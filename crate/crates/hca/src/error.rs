use std::path::{Path, PathBuf};

/// Failures of the IO layer and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("usage error: {0}")]
    Usage(String),
    #[error("config error at {pointer}: {message}")]
    Config { pointer: String, message: String },
    #[error("{}: format error at byte {offset}: {message}", path.display())]
    Format { path: PathBuf, offset: u64, message: String },
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: row {row}: {message}", path.display())]
    Manifest { path: PathBuf, row: usize, message: String },
    #[error("cannot merge reports: {0}")]
    Merge(String),
    #[error(transparent)]
    Core(#[from] hca_core::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        Error::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn config(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { pointer: pointer.into(), message: message.into() }
    }

    /// 2 for usage and configuration problems, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Usage(_) | Error::Config { .. } | Error::Core(hca_core::Error::Config(_)) => 2,
            _ => 1,
        }
    }
}
