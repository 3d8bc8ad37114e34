//! Learning how to spend a fixed budget of quantization bits across the
//! layers of a low-precision CNN.
//!
//! * [`tensor`]: dense tensors, reverse-mode autodiff, Adam.
//! * [`quant`]: fractional-bit quantizer and its straight-through gradients.
//! * [`alloc`]: Gumbel-Softmax budget allocation, annealing, hard assignment.
//! * [`bitgemm`]: bit-plane AND/popcount GEMM and its benchmark harness.
//! * [`model`] / [`train`]: the quantized MNIST network and training loop.
//! * [`data`], [`config`], [`summary`]: IDX ingestion, experiment files, reports.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod alloc;
pub mod bitgemm;
pub mod config;
pub mod data;
mod error;
pub mod model;
pub mod quant;
pub mod summary;
pub mod tensor;
pub mod train;

pub use alloc::{AllocMode, GumbelAllocator, LayerPrecision, TemperatureSchedule};
pub use bitgemm::BitMatrix;
pub use config::{Arm, ExperimentConfig};
pub use data::MnistSet;
pub use error::{Error, Result};
pub use model::{Model, QuantLayer};
pub use quant::BitWidth;
pub use tensor::{Adam, Graph, Real, Tensor, Var};
