//! Pipeline, configuration and reporting behind the `progseg` binary.

pub mod cli;
pub mod config;
pub mod error;
pub mod pipeline;
pub mod render;
pub mod report;
