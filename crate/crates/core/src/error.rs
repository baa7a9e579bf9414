use std::path::PathBuf;

use thiserror::Error;

/// Every failure the library can report.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("guard violation: {0}")]
    GuardViolation(String),
    #[error("corrupt data: {0}")]
    CorruptData(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("memory bank is empty")]
    EmptyBank,
    #[error("need at least {needed} samples, have {have}")]
    InsufficientSamples { needed: usize, have: usize },
    #[error("centroid of domain {0} has zero norm")]
    DegenerateCentroid(usize),
    #[error("pi normalizer {0} is too close to zero")]
    DegenerateNormalizer(f64),
    #[error("accuracy row {0} is all zero")]
    DegenerateRow(usize),
    #[error("alpha has zero mass where pi is positive at ({0}, {1})")]
    DegenerateSupport(usize, usize),
    #[error("missing artifact {artifact}; run `{stage}` first")]
    MissingArtifact { artifact: PathBuf, stage: &'static str },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::InvalidShape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
