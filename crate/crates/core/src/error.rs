use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("expected a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("divergence: {what}{}", step.map(|s| format!(" at step {s}")).unwrap_or_default())]
    Divergence { what: String, step: Option<usize> },

    #[error("batch norm in train mode needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint truncated: {0}")]
    TruncatedCheckpoint(String),

    #[error("unsupported checkpoint version {found} (reader supports {supported})")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("bad IDX magic in {path}: expected {expected:#010x}, found {found:#010x}")]
    IdxMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("IDX dimension mismatch: {0}")]
    IdxDimension(String),

    #[error("IDX file truncated: {path} (expected {expected} bytes, found {found})")]
    IdxTruncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn divergence(what: impl Into<String>, step: Option<usize>) -> Self {
        Error::Divergence {
            what: what.into(),
            step,
        }
    }

    pub fn is_divergence(&self) -> bool {
        matches!(self, Error::Divergence { .. })
    }
}
