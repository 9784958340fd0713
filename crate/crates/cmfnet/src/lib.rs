//! CMFNet: compound multi-branch feature-fusion image restoration.
//!
//! Three attention-specialized U-Net branches (channel / pixel / spatial),
//! fused through residual attention modules and a learnable mixed skip
//! connection, trained with a PSNR/SSIM-derived compound loss on top of a
//! minimal reverse-mode autodiff tensor core.

pub mod attention;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
