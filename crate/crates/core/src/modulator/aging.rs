//! Aging records for staging-tier promotion.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::store::PluginStore;
use crate::clock::unix_millis;
use crate::model::{CheckResult, CheckStatus, Tier};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgingRecord {
    pub plugin_name: String,
    pub consecutive_clean_runs: u32,
    /// Unix milliseconds.
    pub last_failure_at: Option<u64>,
}

#[derive(Debug, thiserror::Error)]
pub enum AgingError {
    #[error("unknown plugin {0:?}")]
    UnknownPlugin(String),
    #[error("plugin {0:?} is not in the staging tier")]
    NotStaging(String),
    #[error("aging state {path}: {message}")]
    Persist { path: PathBuf, message: String },
}

/// Tracks consecutive clean runs per plugin. Skipped results leave the
/// counter unchanged; any failure resets it.
pub struct AgingTracker {
    path: Option<PathBuf>,
    window: u32,
    tiers: BTreeMap<String, Tier>,
    records: Mutex<BTreeMap<String, AgingRecord>>,
}

impl AgingTracker {
    /// Loads existing records from `path` when given and present.
    pub fn open(path: Option<&Path>, window: u32, store: &PluginStore) -> Result<Self, AgingError> {
        let mut records = BTreeMap::new();
        if let Some(p) = path {
            if p.exists() {
                let text = fs::read_to_string(p).map_err(|e| persist_err(p, e))?;
                let list: Vec<AgingRecord> = serde_json::from_str(&text).map_err(|e| persist_err(p, e))?;
                records = list.into_iter().map(|r| (r.plugin_name.clone(), r)).collect();
            }
        }
        Ok(Self {
            path: path.map(Path::to_owned),
            window,
            tiers: store.iter().map(|d| (d.name.clone(), d.tier)).collect(),
            records: Mutex::new(records),
        })
    }

    pub fn record_aging(&self, plugin_name: &str, result: &CheckResult) -> Result<AgingRecord, AgingError> {
        if !self.tiers.contains_key(plugin_name) {
            return Err(AgingError::UnknownPlugin(plugin_name.to_owned()));
        }
        let mut records = self.records.lock().unwrap();
        let rec = records
            .entry(plugin_name.to_owned())
            .or_insert_with(|| AgingRecord { plugin_name: plugin_name.to_owned(), ..Default::default() });
        match result.status {
            CheckStatus::Pass => rec.consecutive_clean_runs = rec.consecutive_clean_runs.saturating_add(1),
            CheckStatus::Skipped => {}
            CheckStatus::Fail | CheckStatus::TimedOut | CheckStatus::Crashed => {
                rec.consecutive_clean_runs = 0;
                rec.last_failure_at = Some(unix_millis());
            }
        }
        let out = rec.clone();
        self.persist(&records)?;
        Ok(out)
    }

    pub fn record(&self, plugin_name: &str) -> Option<AgingRecord> {
        self.records.lock().unwrap().get(plugin_name).cloned()
    }

    pub fn promotion_eligible(&self, plugin_name: &str) -> Result<bool, AgingError> {
        match self.tiers.get(plugin_name) {
            None => Err(AgingError::UnknownPlugin(plugin_name.to_owned())),
            Some(Tier::Staging) => {
                let runs = self.record(plugin_name).map(|r| r.consecutive_clean_runs).unwrap_or(0);
                Ok(runs >= self.window)
            }
            Some(_) => Err(AgingError::NotStaging(plugin_name.to_owned())),
        }
    }

    fn persist(&self, records: &BTreeMap<String, AgingRecord>) -> Result<(), AgingError> {
        let Some(path) = &self.path else {
            return Ok(());
        };
        let list: Vec<&AgingRecord> = records.values().collect();
        let tmp = path.with_extension("json.tmp");
        let text = serde_json::to_string_pretty(&list).expect("records serialize");
        fs::write(&tmp, text).map_err(|e| persist_err(path, e))?;
        fs::rename(&tmp, path).map_err(|e| persist_err(path, e))
    }
}

fn persist_err(path: &Path, e: impl std::fmt::Display) -> AgingError {
    AgingError::Persist { path: path.to_owned(), message: e.to_string() }
}
