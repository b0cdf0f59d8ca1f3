//! Frozen Vision Transformer adaptation with the SIGMA adapter.
//!
//! The crate is layered bottom-up:
//!
//! * [`tensor`], [`autodiff`], [`gradcheck`]: row-major `f64` tensors, a
//!   reverse-mode tape and a finite-difference oracle.
//! * [`nn`]: layer norm, linear, GeLU, depth-wise/point-wise convolution,
//!   multi-head attention and token/grid reshaping.
//! * [`sigma`]: the adapter layer (multi-kernel depth-wise fusion with
//!   per-token scale/shift modulation) and its closed-form parameter count.
//! * [`baselines`]: LoRA, bottleneck adapters, BitFit, Partial-1 and the
//!   freeze strategies, each with an exact parameter counter.
//! * [`vit`]: a plain ViT backbone with adapter insertion points and a
//!   per-pixel head.
//! * [`train`]: synthetic dense-prediction data, AdamW, the training loop,
//!   metrics and adapter-only checkpoints.

pub mod autodiff;
pub mod baselines;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod params;
pub mod sigma;
pub mod tensor;
pub mod train;
pub mod vit;

pub use autodiff::{GradientMap, Graph, Reduce, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
