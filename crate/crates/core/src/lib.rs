//! Multilinear PCA, a federated variant computed over a simulated
//! multi-party protocol, and an image-based degradation prognostics
//! pipeline built on top of both.

pub mod benchmark;
pub mod datagen;
pub mod error;
pub mod exec;
pub mod fed;
pub mod linalg;
pub mod mpca;
pub mod prognostics;
pub mod rng;
pub mod tensor;
pub mod tnsr;

pub use error::{Error, Result};
pub use exec::ExecMode;
pub use tensor::{Matrix, ProjectionSet, Tensor};
