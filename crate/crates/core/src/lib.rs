//! Self-binarizing convolutional networks.
//!
//! Networks train with `tanh(nu * x)` weights and activations whose
//! sharpness `nu` grows every epoch, then freeze into fully binary models:
//! `sign(P)` weights packed one bit per element and every BatchNorm + sign
//! pair folded into an integer threshold comparison. The [`binrt`] runtime
//! executes frozen models with XNOR/popcount kernels and integer compares only.

pub mod bench;
pub mod binrt;
pub mod cmd;
pub mod config;
pub mod data;
pub mod error;
pub mod freeze;
pub mod graph;
pub mod selfbin;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
