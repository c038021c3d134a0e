//! File formats (IDX, weight snapshots), JSON configuration, concurrent
//! search evaluation and the `quadranet` command line, on top of
//! [`quadranet_core`].

pub use quadranet_core as core;

pub mod cli;
pub mod config;
pub mod error;
pub mod idx;
pub mod parallel;
pub mod snapshot;

pub use error::{AppError, Result};
