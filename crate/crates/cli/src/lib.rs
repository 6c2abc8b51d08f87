//! Command-line front end for the decoupled data-based control pipeline.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod commands;
pub mod config;

pub use commands::{cmd_design, cmd_evaluate, cmd_optimize, cmd_pipeline, cmd_sysid, Status};
pub use config::{load, PipelineConfig, Settings};
