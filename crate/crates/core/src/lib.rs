//! Listener motion generation from speaker audio, motion and text.
//!
//! The pipeline has three learned stages:
//! a convolutional VQ-VAE that turns listener expression sequences into
//! discrete tokens, a fusion network that turns speaker modalities into a
//! per-token condition, and an absorbing-state discrete diffusion model over
//! tokens. Everything runs on the CPU in `f64` with a small reverse-mode
//! autodiff tape.

pub mod autograd;
pub mod conditioning;
pub mod container;
pub mod diffusion;
pub mod error;
pub mod listener;
pub mod metrics;
pub mod motion;
pub mod nn;
pub mod optim;
pub mod pipeline;
pub mod quantizer;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use motion::{MotionFrame, MotionSequence};
pub use tensor::Mat;
