//! Config handling and the commands behind the `stmtl` binary.

pub mod commands;
pub mod config;
