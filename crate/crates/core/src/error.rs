use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: wrong magic {found:?}, expected \"UVADTNSR\"")]
    WrongMagic { path: PathBuf, found: [u8; 8] },

    #[error("{path}: unsupported tensor file version {found}")]
    VersionMismatch { path: PathBuf, found: u32 },

    #[error("{path}: unsupported dtype code {code}")]
    UnsupportedDtype { path: PathBuf, code: u32 },

    #[error("{path}: ndim {ndim} outside [1, 4]")]
    BadRank { path: PathBuf, ndim: u32 },

    #[error("{path}: truncated tensor, header declares {expected} payload bytes but {found} remain")]
    Truncated { path: PathBuf, expected: u64, found: u64 },

    #[error("invalid tensor: {0}")]
    InvalidTensor(String),

    #[error("manifest {path}: {source}")]
    ManifestParse {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// A manifest field failed validation; `field` names the offending entry.
    #[error("manifest {manifest}: field `{field}`: {message}")]
    Manifest {
        manifest: String,
        field: String,
        message: String,
    },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("zero-norm vector under cosine metric")]
    ZeroNorm,

    #[error("empty reference set")]
    EmptyReference,

    #[error("empty mask")]
    EmptyMask,

    #[error("non-finite input: {0}")]
    NonFinite(String),

    #[error("invalid k-means request: {0}")]
    KMeans(String),

    #[error("clustering failed: {0}")]
    Clustering(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("AUC undefined: {0}")]
    UndefinedAuc(String),

    #[error("png encoding failed for {path}: {message}")]
    Png { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dims(msg: impl Into<String>) -> Self {
        Error::DimMismatch(msg.into())
    }
}
