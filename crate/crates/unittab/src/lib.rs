//! File formats, checkpoints, run configuration and the command-line
//! driver around [`unittab_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod metrics_log;
pub mod schema_io;

pub use error::{Error, Result};
