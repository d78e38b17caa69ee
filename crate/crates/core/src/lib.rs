//! Quantization-aware training laboratory: simulated quantization with
//! straight-through estimators, per-weight oscillation tracking, the
//! dampening and iterative-freezing remedies, batch-norm statistics
//! diagnostics, small quantizable networks and a 1D toy problem.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod kernels;
pub mod nets;
pub mod normstats;
pub mod optim;
pub mod oscillation;
pub mod quant;
pub mod schedule;
pub mod tensor;
pub mod toylab;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
