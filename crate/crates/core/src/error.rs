use std::path::PathBuf;

use crate::model::ValidationError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Validation(#[from] ValidationError),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("camera {camera} frame {frame}: feature dimension {found}, expected {expected}")]
    DimensionMismatch {
        camera: u32,
        frame: usize,
        expected: usize,
        found: usize,
    },

    #[error("point rows total {found}, configured budget is {expected}")]
    BudgetMismatch { expected: usize, found: usize },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error(transparent)]
    Format(#[from] FormatError),
}

/// Failures reading or writing the on-disk formats.
#[derive(Debug, thiserror::Error)]
pub enum FormatError {
    #[error("{path}: bad magic {found:?}")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: format version {found} unsupported (supported: {supported})")]
    VersionUnsupported {
        path: PathBuf,
        found: u16,
        supported: u16,
    },

    #[error("{path}: header promises {expected} payload bytes, found {found}")]
    ShapeHeaderMismatch {
        path: PathBuf,
        expected: u64,
        found: u64,
    },

    #[error("{path}: {reason}")]
    Malformed { path: PathBuf, reason: String },

    #[error("manifest entry refers to missing file {path}")]
    ManifestMissingEntry { path: PathBuf },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FormatError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Self::Malformed {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True when the failure came from the filesystem rather than file content.
    pub fn is_io(&self) -> bool {
        matches!(self, Self::Io { .. } | Self::ManifestMissingEntry { .. })
    }
}
