//! Convolutional transformer for video frame extrapolation and interpolation.
//!
//! Frames are embedded by a shared conv stack, tagged with sinusoidal
//! positional maps, related to each other by multi-head convolutional
//! self-attention in an encoder/decoder stack, and turned back into RGB by a
//! two-stage U-shaped synthesis network. Everything runs on the small
//! reverse-mode tensor engine in [`tensor`].

pub mod attention;
pub mod cli;
pub mod error;
pub mod metrics;
pub mod model;
pub mod posenc;
pub mod synthdata;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
