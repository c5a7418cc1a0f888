pub mod em;
pub mod error;
pub mod gamma;
mod init;
pub mod likelihood;
pub mod metrics;
pub mod model;
pub mod penalty;
pub mod simgen;
pub mod theta;
pub mod tuning;

pub use error::{Error, Result};
