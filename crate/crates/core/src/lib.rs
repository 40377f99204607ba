//! Core of a lightweight pull-request CI service.

pub mod builder;
pub mod checks;
pub mod clock;
pub mod config;
pub mod gateway;
pub mod inspector;
pub mod journal;
pub mod model;
pub mod modulator;
pub mod process;
pub mod runtime;
pub mod scheduler;
pub mod sim;
pub mod source;
#[doc(hidden)]
pub mod testing;
pub mod webhook;
