//! Masked multi-domain network for conversion-rate prediction across many
//! conversion types and display scenarios with one model.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod domains;
pub mod error;
pub mod eval;
pub mod features;
pub mod kv;
pub mod loss;
pub mod model;
pub mod network;
pub mod serve;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
