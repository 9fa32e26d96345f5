pub mod causal;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod imgops;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod parallel;
pub mod seed;
pub mod trainer;

pub use error::{Error, Result};
