//! File formats, checkpoints, reports and the `boneage` command line on top of
//! [`boneage_core`].

pub mod archive;
pub mod checkpoint;
pub mod cli;
pub mod error;
pub mod manifest;
pub mod report;

pub use error::{Error, Result};
