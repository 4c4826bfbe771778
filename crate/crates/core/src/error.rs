use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed manifest {path}: {reason}")]
    MalformedManifest { path: String, reason: String },

    #[error("missing AndroidManifest.xml in {0}")]
    MissingManifest(PathBuf),

    #[error("corpus {0} contains no usable samples")]
    EmptyCorpus(PathBuf),

    #[error("target directory {0} exists and is not empty")]
    ExistingNonEmptyTarget(PathBuf),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("need at least two families, found {0}")]
    DegenerateLabels(usize),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("family {family} has {count} rows, fewer than {folds} folds")]
    FamilyTooSmall {
        family: String,
        count: usize,
        folds: usize,
    },

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("sample {0} has no family label")]
    Unlabeled(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("corrupt file {path}: {reason}")]
    Corrupt { path: PathBuf, reason: String },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Errors caused by the user's inputs rather than by a bug.
    pub fn is_data_error(&self) -> bool {
        !matches!(self, Error::DimensionMismatch { .. })
    }
}
