//! Configuration parsing and run orchestration behind the `twofluid` binary.

pub mod config;
pub mod run;

/// Environment variable naming the root directory for run outputs.
pub const OUTPUT_ENV: &str = "TWOFLUID_OUT";
