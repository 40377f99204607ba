//! HTTP front end and command-line entry points of the CI daemon.

pub mod server;
pub mod simcmd;
