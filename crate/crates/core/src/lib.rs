pub mod augment;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod model;
pub mod oracles;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
