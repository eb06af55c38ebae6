//! Daemons and command-line client for the mammography grid.

pub mod cli;
pub mod config;
pub mod daemon;
pub mod output;
