//! Library side of the `patchmoe` command-line tool.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod pipeline;
