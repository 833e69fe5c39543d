use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?}: {reason}")]
    InvalidShape { shape: Vec<usize>, reason: String },

    #[error("fully masked attention row")]
    FullyMaskedRow,

    #[error("cloze mask undefined for length 1")]
    ClozeLengthOne,

    #[error("backward called on a computation record that was already consumed")]
    RecordConsumed,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f64 },

    #[error("target class {target} out of range for {classes} classes")]
    TargetOutOfRange { target: usize, classes: usize },

    #[error("no unmasked positions to average over")]
    EmptyMask,

    #[error("row {row} is not a probability distribution (sum {sum})")]
    NotNormalized { row: usize, sum: f64 },

    #[error("unsupported glyph {0:?}")]
    UnsupportedGlyph(char),

    #[error("invalid text {text:?}: {reason}")]
    InvalidText { text: String, reason: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

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

    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    /// Whether this error stems from bad user input (configuration, paths,
    /// flags) rather than a failure during execution.
    pub fn is_usage(&self) -> bool {
        matches!(self, Error::Config(_))
    }
}
