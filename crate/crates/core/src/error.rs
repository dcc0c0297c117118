use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    InvalidArgument { op: &'static str, detail: String },

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },

    #[error("checkpoint {path}: {kind}")]
    Checkpoint { path: PathBuf, kind: CheckpointError },

    #[error("dataset: {0}")]
    Dataset(#[from] DatasetError),

    #[error("config: {0}")]
    Config(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("bad magic bytes (not a checkpoint file)")]
    BadMagic,
    #[error("format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("file is truncated")]
    Truncated,
    #[error("malformed manifest: {0}")]
    Manifest(String),
    #[error("config field `{field}` differs: file has {found}, expected {expected}")]
    ConfigMismatch {
        field: String,
        found: String,
        expected: String,
    },
    #[error("array `{0}` is missing")]
    MissingArray(String),
    #[error("array `{name}` has shape {found:?}, expected {expected:?}")]
    ArrayShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing directory {0}")]
    MissingDir(PathBuf),
    #[error("directory {0} contains no images")]
    EmptySplit(PathBuf),
    #[error("ground-truth masks without a matching test image: {0:?}")]
    OrphanMasks(Vec<PathBuf>),
    #[error("anomalous test image {0} has no ground-truth masks")]
    MissingMasks(PathBuf),
    #[error("malformed defect configuration {path}: {msg}")]
    MalformedConfig { path: PathBuf, msg: String },
    #[error("unknown defect type `{defect_type}` referenced by {path}")]
    UnknownDefect { path: PathBuf, defect_type: String },
    #[error("cannot decode image {path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("unsatisfiable dataset spec: {0}")]
    Unsatisfiable(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(op: &'static str, detail: impl Into<String>) -> Self {
        Error::InvalidArgument {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io { .. } | Error::Checkpoint { .. } => 3,
            Error::Dataset(DatasetError::Image { .. }) => 3,
            Error::NonFinite { .. } => 4,
            _ => 2,
        }
    }
}
