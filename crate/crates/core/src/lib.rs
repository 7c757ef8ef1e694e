//! Dual-path attention-fusion deraining network.
//!
//! A shallow convolutional stem feeds two encoders in parallel: a CNN
//! branch of strided convolutions and residual blocks, and a transformer
//! branch over patch tokens. Their features meet in a channel-attention
//! fusion module and a bilinear-upsampling decoder restores full
//! resolution. Everything needed to train it from scratch lives here:
//! synthetic rain generation ([`rain`]), hand-differentiated layers
//! ([`nn`]), the network ([`model`]), losses and metrics ([`objective`]),
//! and an Adam training loop with checkpoints ([`train`]).

pub mod cli;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod nn;
pub mod objective;
pub mod params;
pub mod rain;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
