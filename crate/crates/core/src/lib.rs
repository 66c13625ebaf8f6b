//! Comprehensive-attention segmentation (spatial, channel and scale attention on
//! a U-Net backbone) built on a small reverse-mode tensor core.

pub mod attention;
pub mod autodiff;
pub mod data;
pub mod gradcheck;
pub mod nn;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
