//! Dual-domain underwater image enhancement.
//!
//! Each RGB channel runs through a spatial branch (multi-scale convolution
//! plus CBAM attention) and a frequency branch (FFT magnitude refinement
//! with the original phase kept). Per-channel fusion, an inter-channel
//! decoder with global attention and a final channel calibration produce
//! the enhanced image.
//!
//! Everything runs in `f64` on a small reverse-mode [`tape::Tape`], so the
//! full network can be checked against finite differences.

pub mod attention;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod spectral;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{FusionError, Result};
pub use model::{AblationConfig, FusionModel, ModelConfig};
pub use tape::{Tape, Var};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
