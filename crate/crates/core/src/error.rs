use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
///
/// Variants are split into two families so the CLI can map them onto exit
/// codes: data that fails validation, and requests that cannot be satisfied
/// as configured.
#[derive(Debug, Error)]
pub enum HecError {
    #[error("bad magic: expected \"HECF\", found {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("invalid bank: {0}")]
    InvalidBank(String),
    #[error("invalid manifest: {0}")]
    InvalidManifest(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("class {0} has no support samples")]
    EmptyClass(usize),
    #[error("need at least 2 support samples, got {0}")]
    TooFewSamples(usize),
    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("cannot sample episode: {0}")]
    InfeasibleEpisode(String),
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("invalid method: {0}")]
    InvalidMethod(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl HecError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HecError::Io { path: path.into(), source }
    }

    /// True when the error means the input data itself is malformed.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            HecError::BadMagic(_)
                | HecError::VersionMismatch { .. }
                | HecError::Truncated { .. }
                | HecError::InvalidBank(_)
                | HecError::InvalidManifest(_)
                | HecError::ShapeMismatch(_)
                | HecError::NonFinite(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, HecError>;
