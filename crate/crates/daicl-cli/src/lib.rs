//! Library surface of the `daicl` command line: configuration, file
//! formats, subcommand implementations, and the remote-completion client
//! with its offline stub server.

pub mod commands;
pub mod config;
pub mod formats;
pub mod remote;
