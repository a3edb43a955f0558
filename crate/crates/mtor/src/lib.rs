//! Std companion of `mtor-core`: dataset generation and IO, experiment
//! configuration, training orchestration, evaluation artifacts, and the CLI.

pub mod config;
pub mod dataset;
pub mod demo2d;
pub mod evalcmd;
pub mod manifest;
pub mod plotfont;
pub mod sweep;
pub mod trainer;
