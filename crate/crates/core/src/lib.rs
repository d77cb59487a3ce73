pub mod buffer;
pub mod cli;
pub mod engine;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod seed;
pub mod taskdata;

pub use error::{Error, Result};
