//! Service configuration: a JSON document with defaults for every optional
//! field. See `docs/config.schema.json` for the documented schema.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_MAX_RUN_QUEUE: usize = 4;
pub const DEFAULT_TIMEOUT_SECONDS: u64 = 600;
pub const DEFAULT_FILE_SIZE_LIMIT: u64 = 5 * 1024 * 1024;
pub const DEFAULT_TIMESTAMP_SKEW: u64 = 86_400;
pub const DEFAULT_AGING_WINDOW: u32 = 30;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid value for {field}: {message}")]
    Validation { field: String, message: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Validation { field: field.into(), message: message.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RepositoryConfig {
    pub repo_id: String,
    pub clone_url: String,
    #[serde(default = "default_branch")]
    pub default_branch: String,
}

fn default_branch() -> String {
    "main".to_owned()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub file_size_limit_bytes: u64,
    pub hardcoded_path_patterns: Vec<String>,
    pub timestamp_skew_seconds: u64,
    /// Extensions allowed to carry an execute bit without a shebang line.
    pub executable_extensions: Vec<String>,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            file_size_limit_bytes: DEFAULT_FILE_SIZE_LIMIT,
            hardcoded_path_patterns: vec!["/home/".into(), "/root/".into()],
            timestamp_skew_seconds: DEFAULT_TIMESTAMP_SKEW,
            executable_extensions: vec![".sh".into(), ".py".into(), ".pl".into()],
        }
    }
}

/// How to run an external analysis tool over the changed files.
///
/// `{files}` in `args` expands to the changed file paths matching
/// `extensions` (all changed files when `extensions` is empty).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolSpec {
    pub program: String,
    #[serde(default)]
    pub args: Vec<String>,
    /// Exit codes counted as a pass. `None` accepts any exit code.
    #[serde(default = "default_pass_codes")]
    pub pass_exit_codes: Option<Vec<i32>>,
    #[serde(default)]
    pub extensions: Vec<String>,
}

fn default_pass_codes() -> Option<Vec<i32>> {
    Some(vec![0])
}

/// Behaviour of a stubbed platform build module.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StubBuildConfig {
    pub cost_seconds: f64,
    pub success_probability: f64,
}

impl Default for StubBuildConfig {
    fn default() -> Self {
        Self { cost_seconds: 1.0, success_probability: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub repositories: Vec<RepositoryConfig>,
    pub max_run_queue: usize,
    pub wait_queue_capacity: Option<usize>,
    pub webhook_secret: Option<String>,
    pub module_toggles: BTreeMap<String, bool>,
    pub module_timeouts: BTreeMap<String, u64>,
    pub default_timeout_seconds: u64,
    pub thresholds: Thresholds,
    pub tools: BTreeMap<String, ToolSpec>,
    pub build_stubs: BTreeMap<String, StubBuildConfig>,
    pub aging_window: u32,
    pub listen_address: String,
    /// Empty disables outbound comment/status calls.
    pub code_host_base_url: String,
    pub code_host_token: Option<String>,
    pub admin_token: Option<String>,
    pub state_dir: PathBuf,
    pub plugins_dir: PathBuf,
    pub lock_timeout_seconds: u64,
    pub kill_grace_seconds: u64,
    pub shutdown_grace_seconds: u64,
    /// Resident-memory budget for supervised plugin processes; `None` disables
    /// the pressure guard.
    pub memory_budget_bytes: Option<u64>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            repositories: Vec::new(),
            max_run_queue: DEFAULT_MAX_RUN_QUEUE,
            wait_queue_capacity: None,
            webhook_secret: None,
            module_toggles: BTreeMap::new(),
            module_timeouts: BTreeMap::new(),
            default_timeout_seconds: DEFAULT_TIMEOUT_SECONDS,
            thresholds: Thresholds::default(),
            tools: BTreeMap::new(),
            build_stubs: BTreeMap::new(),
            aging_window: DEFAULT_AGING_WINDOW,
            listen_address: "127.0.0.1:8080".into(),
            code_host_base_url: String::new(),
            code_host_token: None,
            admin_token: None,
            state_dir: PathBuf::from("state"),
            plugins_dir: PathBuf::from("plugins"),
            lock_timeout_seconds: 120,
            kill_grace_seconds: 5,
            shutdown_grace_seconds: 10,
            memory_budget_bytes: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: ServiceConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn repository(&self, repo_id: &str) -> Option<&RepositoryConfig> {
        self.repositories.iter().find(|r| r.repo_id == repo_id)
    }

    pub fn timeout_for(&self, plugin: &str) -> u64 {
        self.module_timeouts.get(plugin).copied().unwrap_or(self.default_timeout_seconds)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_run_queue < 1 {
            return Err(ConfigError::invalid("max_run_queue", "must be >= 1"));
        }
        if self.wait_queue_capacity == Some(0) {
            return Err(ConfigError::invalid("wait_queue_capacity", "must be >= 1 when set"));
        }
        if self.thresholds.file_size_limit_bytes < 1 {
            return Err(ConfigError::invalid("thresholds.file_size_limit_bytes", "must be >= 1"));
        }
        if self.thresholds.timestamp_skew_seconds < 1 {
            return Err(ConfigError::invalid("thresholds.timestamp_skew_seconds", "must be >= 1"));
        }
        if self.aging_window < 1 {
            return Err(ConfigError::invalid("aging_window", "must be >= 1"));
        }
        if self.default_timeout_seconds < 1 {
            return Err(ConfigError::invalid("default_timeout_seconds", "must be >= 1"));
        }
        for (name, t) in &self.module_timeouts {
            if *t < 1 {
                return Err(ConfigError::invalid(format!("module_timeouts.{name}"), "must be >= 1"));
            }
        }
        if self.lock_timeout_seconds < 1 {
            return Err(ConfigError::invalid("lock_timeout_seconds", "must be >= 1"));
        }
        for (name, stub) in &self.build_stubs {
            if !(0.0..=1.0).contains(&stub.success_probability) {
                return Err(ConfigError::invalid(
                    format!("build_stubs.{name}.success_probability"),
                    "must be within [0, 1]",
                ));
            }
            if !(stub.cost_seconds >= 0.0 && stub.cost_seconds.is_finite()) {
                return Err(ConfigError::invalid(format!("build_stubs.{name}.cost_seconds"), "must be >= 0"));
            }
        }
        match self.listen_address.rsplit_once(':') {
            Some((host, port)) if !host.is_empty() && port.parse::<u16>().is_ok() => {}
            _ => return Err(ConfigError::invalid("listen_address", "expected host:port")),
        }
        if matches!(&self.webhook_secret, Some(s) if s.is_empty()) {
            return Err(ConfigError::invalid("webhook_secret", "must not be empty when set"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (i, repo) in self.repositories.iter().enumerate() {
            if repo.repo_id.is_empty() {
                return Err(ConfigError::invalid(format!("repositories[{i}].repo_id"), "must not be empty"));
            }
            if repo.clone_url.is_empty() {
                return Err(ConfigError::invalid(format!("repositories[{i}].clone_url"), "must not be empty"));
            }
            if !seen.insert(&repo.repo_id) {
                return Err(ConfigError::invalid(format!("repositories[{i}].repo_id"), "duplicate repository"));
            }
        }
        Ok(())
    }
}

/// Loads a JSON config file and validates it.
pub fn load_config(path: &Path) -> Result<ServiceConfig, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
    ServiceConfig::from_json(&text)
}
