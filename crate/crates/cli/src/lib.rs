//! Command-line front end: configuration, weight files, point-cloud I/O and
//! the `verify`, `train`, `eval`, `report` and `bench` commands.

pub mod commands;
pub mod config;
pub mod pointio;
pub mod verify;
pub mod weights;

pub use commands::{run, Cli, Command, ExitCode};
