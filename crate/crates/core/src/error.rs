use std::io;

use thiserror::Error;

pub type Result<T, E = FusionError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FusionError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value produced at stage `{stage}`")]
    NonFinite { stage: String },

    #[error(
        "inverse transform left an imaginary residue of {residue:e} (bound {bound:e}); \
         an upstream operation broke conjugate symmetry"
    )]
    ImaginaryResidue { residue: f64, bound: f64 },

    #[error("loss function is not deterministic: two evaluations gave {first} and {second}")]
    NonDeterministic { first: f64, second: f64 },

    #[error("NaN gradient in parameter `{0}`")]
    NanGradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint CRC mismatch: stored {stored:08x}, computed {computed:08x}")]
    CrcMismatch { stored: u32, computed: u32 },

    #[error("training aborted: {0}")]
    TrainingAborted(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl FusionError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FusionError::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        FusionError::InvalidArgument(msg.into())
    }
}
