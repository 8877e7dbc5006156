use std::io;
use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("i/o error on {}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: invalid UTF-8 on line {line}")]
    InvalidUtf8 { path: PathBuf, line: usize },

    #[error("{0}: file is empty")]
    EmptyFile(PathBuf),

    #[error("alignment mismatch: language {lang} has {found} sentences, expected {expected}")]
    AlignmentMismatch {
        lang: String,
        expected: usize,
        found: usize,
    },

    #[error("corpus is empty after filtering")]
    EmptyCorpus,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("empty sentence")]
    EmptySentence,

    #[error("target id {id} out of range for vocabulary of size {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },

    #[error("non-finite value detected in {0}")]
    NonFinite(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("malformed token sequence: {0}")]
    MalformedTokens(String),

    #[error("bad file format: {0}")]
    Format(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
