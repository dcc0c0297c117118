pub mod checkpoint;
#[cfg(feature = "cli")]
pub mod cli;
pub mod config;
pub mod datasets;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod numeric;
pub mod scorer;
pub mod trainer;

pub use error::{Error, Result};
