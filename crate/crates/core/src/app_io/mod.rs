//! Run configuration, current profiles and result files.
//!
//! Configs and reports are JSON; time series are CSV with one row per grid
//! time. Floats are written in shortest round-trip form, so reading a file
//! back reproduces the values bit for bit.

mod config;
mod profile;
mod results;

pub use config::*;
pub use profile::*;
pub use results::*;
