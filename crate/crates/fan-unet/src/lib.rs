//! FAN-UNet: Fourier Analysis Network layers, windowed self-attention and a
//! U-Net assembly for binary image segmentation, built on a self-contained
//! reverse-mode autodiff engine. No external ML framework.
//!
//! The `examples/` directory of this crate demonstrates each major
//! capability; the `fan-unet` binary exposes train/eval/predict workflows.

pub mod attention;
pub mod checkpoint;
pub mod data;
pub mod demo;
pub mod error;
pub mod fan;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result, TensorError};
pub use tensor::{c, fl, Element, Tensor};
