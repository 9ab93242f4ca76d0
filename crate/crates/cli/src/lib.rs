//! Experiment runner for `vhj-core`: config loading, the staged pipeline,
//! report files and report comparison.

pub mod compare;
pub mod config;
pub mod pipeline;
