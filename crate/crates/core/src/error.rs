use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty logits")]
    EmptyLogits,

    #[error("zero-norm vector")]
    ZeroNorm,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("rotation requires dim >= 2")]
    RotationNeedsTwoDims,

    #[error("class too small to split: class {class} has {count} sample(s)")]
    ClassTooSmall { class: usize, count: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("divergence detected in {0}")]
    Divergence(String),

    #[error("no confident instances at threshold p_th={0}; lower the threshold")]
    NoConfidentInstances(f64),

    #[error("prototype bank not warmed up")]
    BankNotWarm,

    #[error("index {index} out of range for {len} instances")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("corrupt soft label: {0}")]
    CorruptSoftLabel(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("empty test set")]
    EmptyTestSet,

    #[error("architecture mismatch: {0}")]
    ArchitectureMismatch(String),

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
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.into(),
        }
    }
}
