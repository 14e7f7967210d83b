use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("sequence length {len} outside 1..={max}")]
    Length { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    Vocabulary { id: u32, vocab: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("structural mismatch: {0}")]
    Structural(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("refusing to overwrite existing output {} (pass --force)", .0.display())]
    OutputExists(PathBuf),

    #[error("malformed file {}: {message}", path.display())]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format { path: path.into(), message: message.into() }
    }

    /// Process exit code: 2 configuration, 3 missing artifact, 4 numeric failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Domain(_) | Error::OutputExists(_) => 2,
            Error::MissingArtifact(_) | Error::Io(_) | Error::Format { .. } => 3,
            Error::Numeric(_) => 4,
            Error::Length { .. } | Error::Vocabulary { .. } | Error::Structural(_) => 2,
        }
    }
}
