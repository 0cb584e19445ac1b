use std::path::{Path, PathBuf};

#[derive(Debug, thiserror::Error)]
pub enum HfdError {
    #[error(transparent)]
    Core(#[from] hfd_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("image: {0}")]
    Image(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
}

impl HfdError {
    /// Process exit status: 1 for usage and configuration problems, 2 for
    /// bad input data or I/O failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HfdError::Config(_) | HfdError::Usage(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T> = std::result::Result<T, HfdError>;

pub(crate) fn io_at(path: &Path) -> impl FnOnce(std::io::Error) -> HfdError + '_ {
    move |source| HfdError::Io {
        path: path.to_path_buf(),
        source,
    }
}
