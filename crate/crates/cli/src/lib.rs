// Validation guards use `!(x > 0.0)` so NaN inputs are rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Experiment runner for the backward SPDE laboratory: configuration
//! parsing, the per-subcommand runners, result emission, and the fixed
//! verification battery.

pub mod checks;
pub mod config;
pub mod report;
pub mod runner;
