//! Crate-wide error type with process exit-code mapping.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("config error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    Shape {
        expected: String,
        got: String,
        context: String,
    },

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version {found} in {path} (supported: {supported})")]
    BadVersion {
        path: PathBuf,
        found: u32,
        supported: u32,
    },

    #[error("truncated file {path}: {context}")]
    Truncated { path: PathBuf, context: String },

    #[error("trailing bytes after payload in {path}")]
    TrailingBytes { path: PathBuf },

    #[error("format error in {path}: {context}")]
    Format { path: PathBuf, context: String },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn shape(expected: &[usize], got: &[usize], context: impl Into<String>) -> Self {
        Error::Shape {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
            context: context.into(),
        }
    }

    /// Process exit code for the CLI: 1 config, 2 numerical, 3 I/O or format.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Shape { .. } => 1,
            Error::Numerical(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
