use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: invalid shape {shape:?}: {reason}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        reason: String,
    },

    #[error("{op}: input contains an exact zero; add an explicit epsilon")]
    ZeroInput { op: &'static str },

    #[error("{op}: input outside the function domain")]
    Domain { op: &'static str },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("backward already ran on this tape; reset it first")]
    BackwardTwice,

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("variables belong to different tapes")]
    TapeMismatch,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
