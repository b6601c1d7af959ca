//! Integer-only inference: bit-packed tensors, XNOR/popcount kernels, the
//! folded BatchNorm comparison and a shift-based BatchNorm reference.

pub mod bits;
pub mod kernels;
pub mod runtime;
pub mod sbn;

pub use bits::{BitTensor, IntFeatureMap};
pub use kernels::{binary_bn_act, binconv2d, bindense, int_conv2d, int_dense, maxpool2_int, xnor_dot};
pub use runtime::{encode_input, predictions_csv, run_frozen, FrozenInput, Scores};
pub use sbn::{sbn_infer, SbnParams};
