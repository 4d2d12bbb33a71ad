use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{channels} channels cannot be split into {groups} groups")]
    GroupMismatch { channels: usize, groups: usize },

    #[error("k-nearest-neighbor search needs k={k} reference points but only {available} are available")]
    NotEnoughPoints { k: usize, available: usize },

    #[error("cannot sample {requested} points from a cloud of {available}")]
    SampleTooLarge { requested: usize, available: usize },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("reference set of point {point} is empty")]
    EmptyReferenceSet { point: usize },

    #[error("invalid grid spec: {0}")]
    InvalidGrid(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("unknown variant `{0}`")]
    UnknownVariant(String),

    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
