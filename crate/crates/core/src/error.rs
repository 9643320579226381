use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("patch window exceeds image")]
    WindowExceedsImage,
    #[error("need at least two images")]
    TooFewImages,
    #[error("nothing observed")]
    NothingObserved,
    #[error("diverged (reduce eta): non-finite value in {block}")]
    Diverged { block: &'static str },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("model file missing block [{0}]")]
    MissingBlock(&'static str),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;
