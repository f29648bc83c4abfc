use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Feature-file decoding failures, each reported distinctly.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic {0:?}")]
    Magic([u8; 4]),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("truncated: needed {needed} bytes at offset {offset}, have {have}")]
    Truncated { offset: usize, needed: usize, have: usize },
    #[error("non-finite {field} value at index {index}")]
    NonFinite { field: &'static str, index: usize },
    #[error("invalid header: {0}")]
    Header(String),
    #[error("{0} trailing bytes after payload")]
    Trailing(usize),
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error("diffusion step t={t} outside 1..={t_max}")]
    StepOutOfRange { t: usize, t_max: usize },
    #[error("numerical guard: {0}")]
    Numerical(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid statistics: {0}")]
    Stats(String),
    #[error("invalid corpus: {0}")]
    Corpus(String),
    #[error("invalid network spec: {0}")]
    Spec(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("feature file {path}: {source}")]
    Format {
        path: PathBuf,
        #[source]
        source: FormatError,
    },
    #[error("{0}")]
    Decode(#[from] FormatError),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: u64, detail: String },
    #[error("evaluation error: {0}")]
    Eval(String),
    #[error("adapter error: {0}")]
    Adapter(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
