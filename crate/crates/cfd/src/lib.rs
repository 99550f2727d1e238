//! Calibrated feature decomposition for domain-generalizable retrieval.
//!
//! The crate bundles a small reverse-mode autodiff tensor core, calibrated
//! normalization layers (CSBN / CIN), an attention-based feature
//! decomposition block, a toy convolutional backbone, metric-learning
//! losses, a synthetic multi-domain identity benchmark, and an experiment
//! harness that trains, evaluates and ablates the whole stack on a single
//! CPU core.

pub mod ablate;
pub mod attention;
pub mod config;
pub mod data;
pub mod decompose;
pub mod error;
pub mod eval;
pub mod float;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod norm;
pub mod tensor;
pub mod train;

pub use error::Error;
pub use float::Float;
pub use tensor::{Tape, TensorData, Var};

pub type Result<T> = std::result::Result<T, Error>;
