pub mod error;
pub mod harness;
pub mod latency;
pub mod model;
pub mod policy;
pub mod regularizers;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
