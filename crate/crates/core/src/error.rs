use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the engine.
///
/// Variants map onto the failure classes the CLI distinguishes: anything
/// here is a data error (exit code 1); usage errors are reported by the
/// argument parser before any of this runs.
#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: bad magic {found:?}, not a tensor file")]
    Format { path: PathBuf, found: [u8; 4] },
    #[error("{path}: unsupported tensor file version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: {reason}")]
    Corruption { path: PathBuf, reason: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("parse error at `{field}`: {reason}")]
    Parse { field: String, reason: String },
    #[error("geometry error: {0}")]
    Geometry(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: u16, classes: usize },
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parameter error: {0}")]
    Parameter(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("cardinality error: {0}")]
    Cardinality(String),
    #[error("configuration error: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
