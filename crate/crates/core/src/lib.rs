//! Dual-path diffusion editing with faithfulness guidance and scheduled guidance scales,
//! on two toy generative models: an exact Gaussian-mixture denoiser and a small trained
//! attention denoiser over 16×16 procedural images.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analytic;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod nnmodel;
pub mod pipeline;
pub mod tensor;
pub mod transfer;

pub use error::{FgsError, Result};
