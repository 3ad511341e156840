use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("interaction table is empty")]
    EmptyInteractions,

    #[error("noise ratio {0} outside [0, 1]")]
    NoiseRatio(f64),

    #[error("cannot place {requested} noise edges: only {available} free user-item pairs")]
    NoiseCapacity { requested: usize, available: usize },

    #[error("invalid degree strata: {0}")]
    Strata(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index {index} out of range for {what} of size {len}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("user {0} has no negative candidate; rejection sampling cannot terminate")]
    NoNegatives(usize),

    #[error("non-finite loss component `{0}`")]
    NonFinite(&'static str),

    #[error("zero-norm embedding row {0} in contrastive loss")]
    ZeroNorm(usize),

    #[error("dense oracle limited to {cap} nodes, got {nodes}")]
    OracleCap { cap: usize, nodes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed {what} in {path}: {detail}")]
    Format {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
