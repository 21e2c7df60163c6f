//! Style-aligned diffusion at desk scale.
//!
//! A small, fully deterministic pixel-space diffusion stack: spatial feature
//! statistics and adaptive renormalization, shared attention over joint
//! semantic/target stacks with decoupled text fusion, DDIM stepping and
//! inversion, a tiny trainable U-Net noise predictor, and a pipeline that
//! runs five generation modes end to end behind a CLI.

pub mod attention;
pub mod core_stats;
pub mod denoiser;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod pipeline;
pub mod rng;
pub mod tensor;
mod util;

pub use error::{Error, Result};
pub use tensor::ImageTensor;
