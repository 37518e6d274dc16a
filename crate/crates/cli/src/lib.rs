//! Batch front end for the `moe-offload` scheduler and simulator: scenario
//! files, parameter sweeps and trace verification.

pub mod error;
pub mod pipeline;
pub mod scenario;

pub use error::{CliError, Result};
