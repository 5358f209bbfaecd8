//! Clock-ensemble time-scale experiments on top of `clockens-core`:
//! configuration files, Monte-Carlo runs, CSV artifacts and benchmarks.

pub mod bench;
pub mod config;
pub mod csvio;
pub mod error;
pub mod experiment;

pub use config::{load_config, parse_config, Algorithm, ExperimentConfig};
pub use error::{Error, Result};
