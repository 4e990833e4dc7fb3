pub mod config;
pub mod cube;
pub mod error;
pub mod metrics;
mod fft2;
pub mod observation;
pub mod patches;
pub mod pipeline;
pub mod roughest;
pub mod solver;
pub mod sparsedict;
pub mod subspace;
pub mod workflow;

pub use error::{Error, Result};
