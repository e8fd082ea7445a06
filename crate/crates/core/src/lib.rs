pub mod adapters;
pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod metrics;
pub mod seed;
pub mod tasks;
pub mod trainer;
pub mod transformer;

pub use error::{PmoeError, Result};
