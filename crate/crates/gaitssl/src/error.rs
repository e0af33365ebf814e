//! Error types shared across the crate.

use std::path::PathBuf;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed metadata in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("unknown dataset schema version {found} (supported: {supported})")]
    UnknownSchema { found: u32, supported: u32 },

    #[error("unsupported endianness tag {0:?} (only \"little\" is supported)")]
    UnsupportedEndianness(String),

    #[error("shape mismatch: {context}: expected {expected}, found {found}")]
    ShapeMismatch {
        context: String,
        expected: String,
        found: String,
    },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("invalid topology: {0}")]
    InvalidTopology(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate kinematic range for {class}.{field}: min {min} > max {max}")]
    DegenerateRange {
        class: String,
        field: String,
        min: f64,
        max: f64,
    },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("dataset has {0} samples, need at least {1}")]
    DatasetTooSmall(usize, usize),

    #[error("sample {0} has no label but the operation requires labels")]
    MissingLabel(usize),

    #[error("invalid label byte {value} at sample {index}")]
    InvalidLabel { index: usize, value: u8 },

    #[error("memory bank is empty")]
    EmptyBank,

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("unknown tensor {0} in checkpoint")]
    UnknownTensor(String),

    #[error("singular scatter matrix in discriminant projection")]
    SingularScatter,
}

impl Error {
    /// Stable process exit code for the CLI; each error family gets its own.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidConfig(_) | Error::DegenerateRange { .. } => 3,
            Error::MissingFile(_) => 4,
            Error::Io { .. } => 5,
            Error::Json { .. }
            | Error::UnknownSchema { .. }
            | Error::UnsupportedEndianness(_)
            | Error::ShapeMismatch { .. }
            | Error::NonFinite(_)
            | Error::InvalidLabel { .. } => 6,
            Error::EmptyDataset
            | Error::DatasetTooSmall(_, _)
            | Error::MissingLabel(_)
            | Error::InvalidTopology(_) => 7,
            Error::Checkpoint(_) | Error::UnknownTensor(_) => 8,
            Error::EmptyBank | Error::NonFiniteLoss { .. } => 9,
            Error::SingularScatter => 10,
        }
    }
}
