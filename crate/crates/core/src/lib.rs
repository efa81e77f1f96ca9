pub mod autograd;
pub mod dataset;
pub mod error;
pub mod generator;
pub mod metrics;
pub mod knowledge;
pub mod model;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
