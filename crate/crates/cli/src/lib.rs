//! Batch pipeline behind the `visitlift` command.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;
