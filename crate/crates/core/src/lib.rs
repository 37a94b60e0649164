//! SpectralFormer: a transformer backbone for hyperspectral image
//! classification, built on a tape-based reverse-mode autodiff core.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`tensor`] — dense tensors, the differentiable op set, the Wengert
//!   tape, and a finite-difference gradient checker
//! - [`model`] — group-wise spectral embedding, the multi-head encoder
//!   stack with cross-layer adaptive fusion, and checkpoint I/O
//! - [`data`] — HSIF cube I/O, normalization, sample extraction, batching,
//!   and a synthetic dataset generator
//! - [`training`] — cross-entropy loss, Adam with decoupled weight decay,
//!   the staircase learning-rate schedule, and the epoch loop
//! - [`metrics`] — confusion matrices, OA/AA/kappa, evaluation reports,
//!   and classification-map rendering

pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use rng::Rng;
pub use scalar::Scalar;
pub use tensor::{Tape, Tensor, Var};
