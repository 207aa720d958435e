use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the curation toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic bytes in {0}")]
    BadMagic(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("unsupported format: {0}")]
    Format(String),

    #[error("alignment mismatch: expected {expected}, found {found}")]
    Alignment { expected: String, found: String },

    #[error("invalid value: {0}")]
    InvalidValue(String),

    /// Raised when a resampling plan cannot be satisfied without replacement.
    #[error("Need more initial samples. (total deficit {total}, {clusters} clusters short)", total = deficits.iter().sum::<u64>(), clusters = deficits.iter().filter(|d| **d > 0).count())]
    NeedMoreSamples { deficits: Vec<u64> },

    #[error("unsatisfiable clusters (no synthetic mass but positive target): {0:?}")]
    Unsatisfiable(Vec<usize>),

    #[error("epsilon is unbounded: delta {delta} does not exceed the infinite-loss mass {infinity_mass}")]
    UnboundedEpsilon { delta: f64, infinity_mass: f64 },

    #[error("grid too coarse: epsilon error bound {bound} exceeds tolerance {tolerance}")]
    GridTooCoarse { bound: f64, tolerance: f64 },

    #[error("privacy-loss support needs {bins} grid points, more than the limit {limit}; use a coarser grid")]
    LossRangeTooWide { bins: usize, limit: usize },

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("unknown token {0}")]
    UnknownToken(u32),

    #[error("external service failure: {0}")]
    Service(String),

    #[error("missing upstream artifact: {0}")]
    MissingArtifact(PathBuf),

    #[error("stale input {path}: recorded hash {recorded}, found {found}")]
    StaleInput {
        path: PathBuf,
        recorded: String,
        found: String,
    },

    #[error("incomplete run: {0}")]
    IncompleteRun(String),

    #[error("serialization error: {0}")]
    Serde(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
