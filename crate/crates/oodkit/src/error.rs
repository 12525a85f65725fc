use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] oodkit_core::Error),
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: io::Error },
    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: io::Error },
    #[error("{}: {message}", path.display())]
    Parse { path: PathBuf, message: String },
    #[error("{}: row {row}: {message}", path.display())]
    Row { path: PathBuf, row: usize, message: String },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: i64, expected: i64 },
    #[error("tensor {name}: stored shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("{}: truncated payload, {got} of {expected} bytes", path.display())]
    Truncated { path: PathBuf, got: u64, expected: u64 },
    #[error("refusing to mix artifacts: {0}")]
    Fingerprint(String),
    #[error("{0}")]
    Usage(String),
    #[error("output {} is in use by another run (remove {} if stale)", dir.display(), lock.display())]
    Locked { dir: PathBuf, lock: PathBuf },
    #[error("{0}")]
    Internal(String),
}

impl Error {
    pub(crate) fn read(path: &Path, source: io::Error) -> Self {
        Error::Read {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn write(path: &Path, source: io::Error) -> Self {
        Error::Write {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn parse(path: &Path, message: impl ToString) -> Self {
        Error::Parse {
            path: path.to_path_buf(),
            message: message.to_string(),
        }
    }

    pub(crate) fn row(path: &Path, row: usize, message: impl ToString) -> Self {
        Error::Row {
            path: path.to_path_buf(),
            row,
            message: message.to_string(),
        }
    }

    /// 1 for internal failures, 2 for bad usage or bad input.
    pub fn exit_code(&self) -> i32 {
        use oodkit_core::Error as C;
        match self {
            Error::Core(C::NonFiniteGradient(_) | C::NonFiniteLoss { .. } | C::State(_)) => 1,
            Error::Write { .. } | Error::Internal(_) => 1,
            _ => 2,
        }
    }
}

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::read(path, e))
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::read(path, e))
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::write(path, e))
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::write(path, e))
}
