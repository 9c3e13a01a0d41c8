use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error("cannot decode {}: {message}", path.display())]
    Decode { path: PathBuf, message: String },

    #[error("I/O error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("no decodable images in {}", .0.display())]
    EmptyDataset(PathBuf),

    #[error("dataset contains undecodable files: {}", format_files(.0))]
    CorruptFiles(Vec<(PathBuf, String)>),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("training diverged at step {step} ({stage}): {message}")]
    Divergence {
        stage: String,
        step: usize,
        message: String,
        trajectory: Vec<f64>,
        checkpoint: Option<PathBuf>,
    },

    #[error("numerical failure: {message}")]
    Numerical {
        message: String,
        /// Row-major copies of the offending matrices, when there are any.
        matrices: Vec<Vec<f64>>,
    },

    #[error("incompatible checkpoint format version {found} (this build reads {expected})")]
    IncompatibleVersion { found: u32, expected: u32 },

    #[error("checkpoint integrity error: {0}")]
    Integrity(String),

    #[error("config hash mismatch: checkpoint has {checkpoint}, run config has {config}")]
    ConfigMismatch { checkpoint: String, config: String },

    #[error("stage {requested} requires a checkpoint at stage {required} or later, found {found}")]
    StageOrder {
        requested: String,
        required: String,
        found: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("service error: {0}")]
    Service(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

fn format_files(files: &[(PathBuf, String)]) -> String {
    files
        .iter()
        .map(|(p, m)| format!("{} ({m})", p.display()))
        .collect::<Vec<_>>()
        .join(", ")
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn validation<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Validation(msg.into()))
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
