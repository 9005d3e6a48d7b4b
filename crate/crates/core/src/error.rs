use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("truncated file: expected {expected} bytes of voxel data, found {found}")]
    TruncatedFile { expected: usize, found: usize },

    #[error("separate .hdr/.img NIfTI pairs are not supported; convert to a single .nii file")]
    PairedFile,

    #[error("age {0} days does not fall inside any cohort window")]
    OutOfCohortRange(u32),

    #[error("label {label} is out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("input contains non-finite values")]
    NonFinite,

    #[error("manifest is empty")]
    EmptyManifest,

    #[error("invalid manifest: {0}")]
    Manifest(String),

    #[error("evaluation set is empty")]
    EmptyEvaluation,

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("architecture hash mismatch: checkpoint {found}, model {expected}")]
    HashMismatch { expected: String, found: String },

    #[error("checkpoint is truncated or corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("{path}: {source}")]
    Path {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn at_path(path: impl Into<PathBuf>) -> impl FnOnce(io::Error) -> Self {
        let path = path.into();
        move |source| Error::Path { path, source }
    }
}
