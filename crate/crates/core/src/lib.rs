//! Predictive-filtering image inpainting.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`], [`ops`], [`autograd`], [`param`], [`gradcheck`]: a small
//!   differentiable substrate (4-D tensors, convolutions, reverse mode).
//! - [`filter`]: per-pixel kernel filtering at image and feature level.
//! - [`model`]: the two-branch filtering network, its ablation variants and
//!   the patch discriminator.
//! - [`losses`], [`train`]: the four-term objective, Adam and checkpoints.
//! - [`data`], [`metrics`]: image I/O, masks, fixtures, PSNR/SSIM/L1 and
//!   reports.

pub mod autograd;
pub mod config;
pub mod data;
pub mod error;
pub mod filter;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod mtf;
pub mod ops;
pub mod param;
pub mod tensor;
pub mod train;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use filter::{Boundary, FilterConfig, KernelField, Normalize};
pub use model::{ForwardOptions, KernelMode, MisfModel, ModelConfig, Preset, Variant};
pub use tensor::{Precision, Scalar, Tensor};
