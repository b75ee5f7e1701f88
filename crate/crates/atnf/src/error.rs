use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("ppm: {0}")]
    Ppm(String),
    #[error("json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("config: {0}")]
    Config(String),
    #[error("model file: bad magic {found:?}")]
    BadMagic { found: Vec<u8> },
    #[error("model file: version {found}, this build reads {expected}")]
    VersionMismatch { found: u8, expected: u8 },
    #[error("model file: truncated, need {needed} bytes, have {available}")]
    Truncated { needed: u64, available: u64 },
    #[error("model file: tensors {first} and {second} overlap")]
    OverlappingOffsets { first: String, second: String },
    #[error("model file: {0}")]
    MalformedHeader(String),
    #[error(transparent)]
    Core(#[from] atnf_core::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    pub(crate) fn json(path: &Path, source: serde_json::Error) -> Self {
        Self::Json {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Prefixes format errors with the offending file.
    pub(crate) fn context(self, path: &Path) -> Self {
        match self {
            Self::Ppm(m) => Self::Ppm(format!("{}: {m}", path.display())),
            Self::Dataset(m) => Self::Dataset(format!("{}: {m}", path.display())),
            other => other,
        }
    }

    /// Stable identifier for machine-readable error output.
    pub fn kind(&self) -> &'static str {
        match self {
            Self::Io { .. } => "io",
            Self::Ppm(_) => "ppm",
            Self::Json { .. } => "json",
            Self::Dataset(_) => "dataset",
            Self::Config(_) => "config",
            Self::BadMagic { .. } => "bad_magic",
            Self::VersionMismatch { .. } => "version_mismatch",
            Self::Truncated { .. } => "truncated_payload",
            Self::OverlappingOffsets { .. } => "overlapping_offsets",
            Self::MalformedHeader(_) => "malformed_header",
            Self::Core(e) => match e {
                atnf_core::Error::ShapeMismatch { .. } | atnf_core::Error::InvalidShape { .. } => "shape",
                atnf_core::Error::InvalidArgument(_) => "invalid_argument",
                atnf_core::Error::NonScalarRoot(_) => "non_scalar_root",
                atnf_core::Error::NonFinite(_) => "non_finite",
                atnf_core::Error::ArchitectureMismatch { .. } => "architecture_mismatch",
                atnf_core::Error::EmptyDataset => "empty_dataset",
            },
        }
    }
}
