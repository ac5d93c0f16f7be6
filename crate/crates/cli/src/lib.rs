//! Command-line driver for the `ahl` experiments.

pub mod config;
pub mod progress;
pub mod report;
pub mod run;
pub mod selftest;
