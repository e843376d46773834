//! Lightweight dual-branch image denoiser: a UNet pixel branch and a
//! gradient-map structure branch built from complementary dense/sparse
//! attention blocks, on a minimal reverse-mode autodiff core, with an
//! analytic MAC/FLOPs profiler, desk-scale trainer, and CLI.

pub mod ablate;
pub mod arch;
pub mod audit;
pub mod cam;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod loss;
pub mod nn;
pub mod ops;
pub mod profile;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::{Shape, Tensor};
