pub mod bank;
pub mod cli;
pub mod error;
pub mod gradcheck;
pub mod ids;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod pgm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
