//! Instance-layer normalization for U-Net segmentation, on a small
//! from-scratch tensor and reverse-mode differentiation engine.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense `(N, H, W, C)` tensors, moments, channel plumbing and
//!   the `NKT1` binary format.
//! - [`autograd`]: the tape ([`Graph`]) and the finite-difference
//!   [`grad_check`] oracle.
//! - [`norm`]: IN, LN, GN, BN, the clip/sigmoid/softmax combiners and ILN.
//! - [`unet`]: the four-pooling U-Net with 22 normalization sites.
//! - [`train`]: momentum SGD, the two-epoch schedule and learning-rate sweeps.
//! - [`data`] and [`metrics`]: synthetic ventricle-like data, rotation
//!   augmentation, subject-level folds and the Dice coefficient.
//! - [`experiment`]: the ablation and baseline tables, rho curves and timing.

pub mod autograd;
pub mod data;
pub mod error;
pub mod experiment;
pub(crate) mod kernels;
pub mod metrics;
pub mod norm;
pub mod scalar;
pub mod tensor;
pub mod train;
pub mod unet;

pub use autograd::{grad_check, GradCheckReport, Gradients, Graph, ParamStore, Var};
pub use error::{Error, Result};
pub use kernels::Grouping;
pub use norm::{Combiner, NormConfig, NormKind, NormParams, Rho};
pub use scalar::{DType, Scalar};
pub use tensor::{Axes, Axis, BinaryOp, Shape, Tensor, UnaryOp};
pub use unet::{UNetConfig, UNetModel};

