//! Quick-attention encoder-decoder segmentation on a small reverse-mode
//! autodiff engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`ops`]: dense tensors, the tape, and the
//!   differentiable operators the network needs.
//! - [`blocks`], [`network`]: quick attention, expanded convolutions, ASPP
//!   and the full encoder-decoder.
//! - [`losses`], [`metrics`]: BCE + focal + dice training loss and the
//!   evaluation metrics.
//! - [`data`], [`trainer`], [`checkpoint`]: patching, synthetic data,
//!   Adam training and the binary checkpoint format.
//! - [`gradcheck`]: finite-difference verification suite.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod params;
pub mod tensor;
pub mod trainer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};

/// Whether layers use batch statistics and dropout (train) or running
/// statistics and no dropout (infer).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}
