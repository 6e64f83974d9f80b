//! Run configuration, checkpointing and the `train` / `eval` /
//! `export-curves` commands.

pub mod checkpoint;
pub mod commands;
pub mod config;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
