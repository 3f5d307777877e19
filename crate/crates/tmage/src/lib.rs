//! Files, manifests, checkpoints, the training driver and the `tmage`
//! command line around `tmage-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod fit;
pub mod io;
pub mod manifest;

pub use error::{AppError, Result};
