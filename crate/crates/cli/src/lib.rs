//! Command implementations behind the `prvr` binary.

pub mod commands;
pub mod manifest;
