//! Cascaded residual CNN denoising of simulated low-dose CT.

pub mod cascade;
pub mod ctsim;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod seed;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
