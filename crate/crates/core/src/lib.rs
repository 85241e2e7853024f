//! Tumor-conditioned vision transformer for MRI contrast synthesis.

pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod tensor;
pub mod train;
pub mod util;

pub use error::{Error, Result};
pub use tensor::{Real, Tape, Tensor, Var};
