use std::io;

use thiserror::Error;

/// Errors produced across the pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("covariance is not positive semidefinite (min eigenvalue {min_eigenvalue:e}, trace {trace:e})")]
    CorruptedCovariance { min_eigenvalue: f64, trace: f64 },

    #[error("bad magic number: expected {expected:?}, found {found:?}")]
    BadMagic { expected: Vec<u8>, found: Vec<u8> },

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { expected: u16, found: u16 },

    #[error("file truncated while reading {what}")]
    Truncated { what: &'static str },

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),

    #[error("numerical divergence: {0}")]
    Divergence(String),

    #[error("domain mismatch: {0}")]
    DomainMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
