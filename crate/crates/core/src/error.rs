use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("cannot resolve {what}: {path}")]
    Resolve { what: &'static str, path: PathBuf },

    #[error("configuration error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("shape mismatch in {context}: expected {expected:?}, got {actual:?}")]
    Shape { context: String, expected: Vec<usize>, actual: Vec<usize> },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("non-finite values produced by {layer}")]
    Numeric { layer: String },

    #[error("prediction/ground-truth keys do not match; missing: {missing:?}")]
    KeyMismatch { missing: Vec<String> },

    #[error("incompatible tensors: {}", .mismatches.join("; "))]
    Incompatible { mismatches: Vec<String> },

    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn shape(context: impl Into<String>, expected: &[usize], actual: &[usize]) -> Self {
        Error::Shape { context: context.into(), expected: expected.to_vec(), actual: actual.to_vec() }
    }

    /// Stable, machine-parsable class name used by the command line front end.
    pub fn class(&self) -> &'static str {
        match self {
            Error::Parse { .. } => "ParseError",
            Error::Io { .. } => "IoError",
            Error::Image { .. } => "ImageError",
            Error::Resolve { .. } => "ResolveError",
            Error::Config { .. } => "ConfigError",
            Error::Shape { .. } => "ShapeError",
            Error::Input(_) => "InputError",
            Error::Numeric { .. } => "NumericFault",
            Error::KeyMismatch { .. } => "KeyMismatch",
            Error::Incompatible { .. } => "IncompatibleCheckpoint",
            Error::Format { .. } => "FormatError",
        }
    }
}
