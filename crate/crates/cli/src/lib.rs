//! Command-line front end: configuration handling and the commands behind
//! the `maskfield` binary.

pub mod commands;
pub mod config;
pub mod input;
