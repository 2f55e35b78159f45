//! Error type shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A binary primitive received incompatible operand shapes.
    #[error("shape mismatch in `{primitive}`: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        primitive: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A primitive received an operand of unusable shape.
    #[error("invalid shape {shape:?} for `{primitive}`: expected {expected}")]
    InvalidShape {
        primitive: &'static str,
        shape: Vec<usize>,
        expected: &'static str,
    },

    #[error("backpropagation requires a scalar output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("training aborted: non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },

    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNorm,

    #[error("unknown parameter path `{0}`")]
    UnknownParameter(String),

    #[error("unknown primitive `{0}`")]
    UnknownPrimitive(String),

    #[error("cannot pack {moments} moments into video `{video}` of {frames} frames")]
    InfeasiblePacking {
        video: String,
        moments: usize,
        frames: usize,
    },

    #[error("query `{0}` missing from rankings")]
    MissingRanking(String),

    #[error("dimension mismatch: checkpoint expects {expected}, corpus provides {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("timer resolution insufficient for the measured region; increase trials (currently {trials})")]
    TimerResolution { trials: usize },

    #[error("malformed file `{path}`: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
