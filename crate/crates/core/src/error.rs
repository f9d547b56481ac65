use std::path::PathBuf;

/// Errors raised by the training stack.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite gradient for parameter `{param}`")]
    NonFiniteGradient { param: String },

    #[error("non-finite {component} loss at step {step}")]
    NonFiniteLoss { component: &'static str, step: u64 },

    #[error("quantile level {0} outside [0, 1]")]
    TauOutOfRange(f64),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset header error in {path}: {detail}")]
    Header { path: PathBuf, detail: String },

    #[error("dataset blob error in {path}: {detail}")]
    Blob { path: PathBuf, detail: String },

    #[error("checkpoint error in {path}: {detail}")]
    Checkpoint { path: PathBuf, detail: String },

    #[error("adversarial corruption of {0} requires a pretrained attacker")]
    MissingAttacker(&'static str),

    #[error("dataset carries no corruption labels")]
    MissingLabels,

    #[error("{0}")]
    Mismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
