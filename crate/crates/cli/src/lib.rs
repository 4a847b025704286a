//! Orchestration for the `tomnet` binary: config, seeds, pipeline stages and
//! argument dispatch.

pub mod commands;
pub mod config;
pub mod pipeline;
pub mod seeds;

pub use commands::dispatch;
