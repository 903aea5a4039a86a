use std::path::PathBuf;

/// Errors from file formats, transports and the command line.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] pollen_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: PathBuf, line: usize, column: usize, message: String },
    #[error("{path}: unsupported version {found:?}")]
    Version { path: PathBuf, found: String },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("image decode failed for {path}: {message}")]
    Decode { path: PathBuf, message: String },
    #[error("config: {0}")]
    Config(String),
    #[error("usage: {0}")]
    Usage(String),
    #[error("external embedder timed out after {0:?}")]
    Timeout(std::time::Duration),
    #[error("external embedder transport: {0}")]
    Transport(String),
    #[error("external embedder protocol: {0}")]
    Protocol(String),
    #[error("external embedder returned {got} values, expected {expected}")]
    EmbeddingDimension { expected: usize, got: usize },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    /// Process exit status: 2 for input, parse and IO problems, 3 for
    /// numeric or degenerate data, 4 for external embedder transport.
    pub fn exit_code(&self) -> i32 {
        use pollen_core::Error as C;
        match self {
            Error::Core(C::Numeric(_) | C::Degenerate(_)) => 3,
            Error::Core(C::Embedder(_)) => 4,
            Error::Timeout(_) | Error::Transport(_) | Error::Protocol(_) | Error::EmbeddingDimension { .. } => 4,
            _ => 2,
        }
    }
}
