use std::path::PathBuf;

use cosync_autograd::CtcError;

use crate::data_io::RecordError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid value for `{field}`: {reason}")]
    InvalidConfig { field: String, reason: String },

    #[error("unknown config key `{0}`")]
    UnknownKey(String),

    #[error("shape mismatch in {context}: {detail}")]
    Shape { context: &'static str, detail: String },

    #[error("mask [{start}, {end}) out of bounds for {len} frames")]
    MaskOutOfBounds { start: usize, end: usize, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("sampler state became non-finite at step {step}")]
    NonFiniteState { step: usize },

    #[error("zero-norm frame {frame} in contrastive input")]
    ZeroNormFrame { frame: usize },

    #[error("{0}")]
    Ctc(#[from] CtcError),

    #[error("record: {0}")]
    Record(#[from] RecordError),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: String, expected: String },

    #[error("training diverged at step {step} on sample `{utt_id}`: {detail}")]
    Diverged {
        step: usize,
        utt_id: String,
        detail: String,
    },

    #[error("{0}")]
    Metric(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(context: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            context,
            detail: detail.into(),
        }
    }

    pub(crate) fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
