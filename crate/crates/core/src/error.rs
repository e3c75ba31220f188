use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate quaternion")]
    DegenerateQuaternion,

    #[error("point behind camera")]
    BehindCamera,

    #[error("malformed splat PLY: {0}")]
    MalformedPly(String),

    #[error("non-finite field")]
    NonFiniteField,

    #[error("empty object")]
    EmptyObject,

    #[error("empty mask")]
    EmptyMask,

    #[error("no proposals")]
    NoProposals,

    #[error("non-finite gradient at step {0}")]
    NonFiniteGradient(usize),

    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),

    #[error("embedding shape mismatch: {0}")]
    EmbeddingShape(String),

    #[error("unsupported database version: {0}")]
    UnsupportedVersion(String),

    #[error("checksum mismatch for {0}")]
    Checksum(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
