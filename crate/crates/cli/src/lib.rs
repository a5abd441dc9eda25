//! Command-line front end for hyperspectral/multispectral fusion: cube file
//! I/O, configuration, run manifests and the `synth`, `fuse`, `metrics` and
//! `validate` commands.

pub mod commands;
pub mod config;
pub mod cubefile;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod preview;
pub mod validate;

pub use error::{CliError, CliResult};
