//! Differentiable operators recorded on a [`Tape`](crate::autodiff::Tape).

pub mod conv;
pub mod dropout;
pub mod elementwise;
pub mod norm;
pub mod spatial;

pub use conv::{conv_output_len, ConvOptions, Padding};
pub use elementwise::sigmoid_scalar;
pub use norm::{BatchNormOptions, RunningStats, BN_EPSILON, BN_MOMENTUM};
