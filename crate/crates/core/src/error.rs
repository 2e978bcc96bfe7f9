//! Error taxonomy shared across the toolkit.
//!
//! Variants map onto the CLI exit codes: configuration/input errors exit
//! with 2, training and numerical errors with 3, I/O errors with 4.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("training error at epoch {epoch}, step {step}: {msg}")]
    Training {
        epoch: usize,
        step: usize,
        msg: String,
    },

    #[error("i/o error on {path}: {msg}")]
    Io { path: String, msg: String },
}

impl Error {
    pub fn io(path: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Error::Io {
            path: path.into(),
            msg: err.to_string(),
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 2,
            Error::Numerical(_) | Error::Training { .. } => 3,
            Error::Io { .. } => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
