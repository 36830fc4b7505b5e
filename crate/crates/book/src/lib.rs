//! Compiles and runs the guide's code listings as doc-tests.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/tensors.md")]
pub mod tensors {}

#[doc = include_str!("../../../book/src/autograd.md")]
pub mod autograd {}

#[doc = include_str!("../../../book/src/normalization.md")]
pub mod normalization {}

#[doc = include_str!("../../../book/src/unet.md")]
pub mod unet {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/experiments.md")]
pub mod experiments {}
