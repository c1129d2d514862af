//! Context-aware encoder-decoder network for low-light image enhancement.
//!
//! The crate is self-contained: a dense NCHW [`Tensor`] with a reverse-mode
//! [`Tape`], the network [`blocks`], the [`optim`] Adam optimizer and step
//! schedule, image codecs and augmentation in [`data`], and PSNR/SSIM in
//! [`metrics`].

pub mod blocks;
pub mod data;
pub mod error;
pub mod gradcheck;
mod kernels;
pub mod metrics;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use blocks::{ContextNet, NetworkConfig, UpsampleMode, Variant};
pub use error::{Error, Result};
pub use params::ParamStore;
pub use tape::{OpKind, ParamVars, Tape, Var};
pub use tensor::{Real, Shape, Tensor};
