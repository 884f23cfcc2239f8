//! File formats, checkpoints, run manifests and pipeline stages on top of
//! `dmc-core`. The `dmc` binary is a thin wrapper over [`pipeline`].

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod manifest;
pub mod pipeline;
pub mod tables;

pub use config::{Mode, RunConfig};
pub use error::{Error, Result};
