use std::path::PathBuf;

use crate::tensor::Shape;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left} and {right}")]
    ShapeMismatch {
        op: &'static str,
        left: Shape,
        right: Shape,
    },

    #[error("{0}")]
    InvalidArgument(String),

    #[error("backward requires a scalar loss, got shape {0}")]
    NonScalarLoss(Shape),

    #[error("no gradient for parameter `{0}`")]
    MissingGrad(String),

    #[error("non-finite loss at step {step} (last checkpoint: {})", last_checkpoint.as_ref().map(|p| p.display().to_string()).unwrap_or_else(|| "none".into()))]
    NonFiniteLoss {
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("gradient check failed: max relative error {max_rel_error:.3e} in {}", offenders.join(", "))]
    GradCheck {
        max_rel_error: f64,
        offenders: Vec<String>,
    },

    #[error("bad PPM magic in {path}: expected P6")]
    PpmBadMagic { path: PathBuf },

    #[error("malformed PPM header in {path}: {reason}")]
    PpmMalformedHeader { path: PathBuf, reason: String },

    #[error("short PPM file {path}: expected {expected} payload bytes, found {actual}")]
    PpmShortFile {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("invalid checkpoint: {0}")]
    Checkpoint(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("invalid sequence metadata in {path}: {reason}")]
    Meta { path: PathBuf, reason: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub(crate) trait IoContext<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T>;
}

impl<T> IoContext<T> for std::io::Result<T> {
    fn io_context(self, context: impl FnOnce() -> String) -> Result<T> {
        self.map_err(|e| Error::io(context(), e))
    }
}
