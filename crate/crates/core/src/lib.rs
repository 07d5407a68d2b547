pub mod error;
pub mod criteria;
pub mod graph;
pub mod harness;
pub mod reid;
pub mod strategies;
pub mod tensor;

pub use error::{Error, Result};
