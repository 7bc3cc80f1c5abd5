//! Configuration, artifact handling and command implementations behind the
//! `psrl` binary.

pub mod commands;
pub mod config;

pub use commands::{cmd_attack, cmd_certify, cmd_eval, cmd_report, cmd_train, Checkpoints};
pub use config::{ConfigError, RunConfig, SweepEps};
