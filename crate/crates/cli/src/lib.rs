//! Experiment harness: checkpoints, configuration files, run reports and
//! the command implementations behind the `sfod` binary.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod report;
