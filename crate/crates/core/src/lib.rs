//! From-scratch neural-network engine for binary image classification.
//!
//! The crate builds everything above `std` itself: a dense `f32` tensor with
//! identity-based gradient storage, reverse-mode autodiff on an operation
//! tape, convolution/pooling/normalization kernels, model builders, a seeded
//! data pipeline, confusion-matrix metrics, and a deterministic trainer.
//! Every source of randomness flows from a single master seed, and every
//! kernel fixes its summation order, so a run is reproducible bit for bit.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod ops;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::GradTape;
pub use tensor::Tensor;
