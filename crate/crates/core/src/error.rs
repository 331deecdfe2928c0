use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("config parse error at line {line}: {msg}")]
    ConfigParse { line: usize, msg: String },

    #[error("checkpoint has bad magic")]
    BadMagic,

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("checkpoint checksum mismatch")]
    Checksum,

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("malformed graymap header: {0}")]
    PgmHeader(String),

    #[error("graymap depth overflow: {0}")]
    PgmDepth(String),

    #[error("truncated graymap payload: expected {expected} bytes, found {found}")]
    PgmTruncated { expected: usize, found: usize },

    #[error("metric undefined: {0}")]
    UndefinedMetric(&'static str),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training diverged at stage {stage}, epoch {epoch}, batch {batch} (lr {lr}): loss = {loss}")]
    Divergence {
        stage: usize,
        epoch: usize,
        batch: usize,
        lr: f64,
        loss: f64,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
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
}
