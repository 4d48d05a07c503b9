//! Error type shared by every module of the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("frame is not tight (max deviation of S from (N/d)I is {deviation:e})")]
    NotTight { deviation: f64 },

    #[error("frame operator is singular")]
    SingularFrame,

    #[error("frame coefficient of magnitude {magnitude} exceeds alphabet range (K - 1/2)*delta = {limit}")]
    NormOverflow { magnitude: f64, limit: f64 },

    #[error("step constraint violated: vector {index} has norm {norm} > (K - 1/2)*delta = {limit}")]
    StepConstraint { index: usize, norm: f64, limit: f64 },

    #[error("permutation variation {achieved} exceeds guaranteed bound {threshold}")]
    PermutationBound { achieved: f64, threshold: f64 },

    #[error("bound precondition violated: {0}")]
    Precondition(String),

    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("truncated {what}: expected {expected} bytes, found {actual}")]
    Truncated {
        what: String,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Broad failure classes, used by the command-line harness to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Constraint,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Tags the error with the layer it arose in, unless already tagged.
    pub fn in_layer(self, layer: usize) -> Self {
        match self {
            e @ Error::Layer { .. } => e,
            other => Error::Layer {
                layer,
                source: Box::new(other),
            },
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::NotTight { .. }
            | Error::NormOverflow { .. }
            | Error::StepConstraint { .. }
            | Error::PermutationBound { .. }
            | Error::Precondition(_) => ErrorClass::Constraint,
            Error::Layer { source, .. } => source.class(),
            Error::DimensionMismatch { .. }
            | Error::SingularFrame
            | Error::Format(_)
            | Error::Truncated { .. }
            | Error::Io { .. } => ErrorClass::Data,
        }
    }
}
