//! Plugin store, execution order, code-host reporting and aging records.

pub mod aging;
pub mod codehost;
pub mod store;

pub use aging::{AgingError, AgingRecord, AgingTracker};
pub use codehost::{
    status_for, CodeHost, CodeHostCall, CodeHostError, HttpCodeHost, NoopCodeHost, RecordingCodeHost, StatusState,
};
pub use store::{builtin_table, load_store, PluginManifest, PluginStore, StoreError, PLATFORM_MODULES};
