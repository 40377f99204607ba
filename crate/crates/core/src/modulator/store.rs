use std::collections::BTreeSet;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::ServiceConfig;
use crate::model::{PluginDescriptor, PluginGroup, PluginKind, Tier};

pub const MANIFEST_FILE: &str = "plugin.json";
/// Order index given to the first external plugin of a tier when its
/// manifest does not set one.
pub const EXTERNAL_INDEX_BASE: u32 = 100;

/// Platform build modules, run by the builder.
pub const PLATFORM_MODULES: [&str; 4] = ["tizen", "android", "ubuntu", "yocto"];

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("duplicate plugin name {0:?}")]
    DuplicateName(String),
    #[error("bad plugin manifest {path}: {message}")]
    Manifest { path: PathBuf, message: String },
    #[error("module toggle names unknown plugin {0:?}")]
    UnknownToggle(String),
}

/// Contents of `plugins/<tier>/<name>/plugin.json`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PluginManifest {
    pub name: String,
    pub group: PluginGroup,
    pub timeout_seconds: Option<u64>,
    /// Relative to the manifest directory.
    pub exec: PathBuf,
    pub order_index: Option<u32>,
    /// Must match the directory it lives in when given.
    pub tier: Option<Tier>,
}

/// The built-in modules with their default order index.
pub fn builtin_table() -> Vec<(u32, &'static str, PluginGroup)> {
    let pre = [
        "clang-format",
        "cppcheck",
        "pylint",
        "indent",
        "doc-tag",
        "doc-build",
        "scancode",
        "file-size",
        "newline",
        "nobody",
        "signed-off",
        "hardcoded-path",
        "executable",
        "timestamp",
        "sloccount",
        "flawfinder",
    ];
    let mut out: Vec<_> = pre.iter().enumerate().map(|(i, n)| (i as u32 + 1, *n, PluginGroup::PreBuild)).collect();
    out.extend(PLATFORM_MODULES.iter().enumerate().map(|(i, n)| (i as u32 + 17, *n, PluginGroup::PostBuild)));
    out
}

/// Ordered, immutable set of plugin descriptors.
#[derive(Clone, Debug, Default)]
pub struct PluginStore {
    descriptors: Vec<PluginDescriptor>,
}

impl PluginStore {
    /// Sorts into tier-then-index order; names must be unique.
    pub fn from_descriptors(mut descriptors: Vec<PluginDescriptor>) -> Result<Self, StoreError> {
        let mut names = BTreeSet::new();
        for d in &descriptors {
            if !names.insert(d.name.clone()) {
                return Err(StoreError::DuplicateName(d.name.clone()));
            }
        }
        descriptors.sort_by(|a, b| (a.tier, a.order_index, &a.name).cmp(&(b.tier, b.order_index, &b.name)));
        Ok(Self { descriptors })
    }

    pub fn iter(&self) -> impl Iterator<Item = &PluginDescriptor> {
        self.descriptors.iter()
    }

    pub fn get(&self, name: &str) -> Option<&PluginDescriptor> {
        self.descriptors.iter().find(|d| d.name == name)
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    /// Enabled descriptors of `group`, in store order.
    pub fn execution_plan(&self, group: PluginGroup) -> Vec<PluginDescriptor> {
        self.descriptors.iter().filter(|d| d.enabled && d.group == group).cloned().collect()
    }

    /// Copy with toggles applied; a name not in the store is an error.
    pub fn with_toggles<'a>(
        &self,
        toggles: impl IntoIterator<Item = (&'a String, &'a bool)>,
    ) -> Result<Self, StoreError> {
        let mut next = self.clone();
        for (name, on) in toggles {
            let d = next
                .descriptors
                .iter_mut()
                .find(|d| &d.name == name)
                .ok_or_else(|| StoreError::UnknownToggle(name.clone()))?;
            d.enabled = *on;
        }
        Ok(next)
    }
}

fn manifest_err(path: &Path, message: impl Into<String>) -> StoreError {
    StoreError::Manifest { path: path.to_owned(), message: message.into() }
}

fn read_manifest(path: &Path) -> Result<PluginManifest, StoreError> {
    let text = fs::read_to_string(path).map_err(|e| manifest_err(path, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| manifest_err(path, e.to_string()))
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>, StoreError> {
    let entries = fs::read_dir(dir).map_err(|e| manifest_err(dir, e.to_string()))?;
    let mut out: Vec<PathBuf> = entries.flatten().map(|e| e.path()).filter(|p| p.is_dir()).collect();
    out.sort();
    Ok(out)
}

/// Discovered externals, each with whether its manifest fixed the order index.
fn external_descriptors(root: &Path, config: &ServiceConfig) -> Result<Vec<(PluginDescriptor, bool)>, StoreError> {
    let mut out = Vec::new();
    if !root.exists() {
        return Ok(out);
    }
    for dir in sorted_subdirs(root)? {
        let dir_name = dir.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if !Tier::ALL.iter().any(|t| t.dir_name() == dir_name) {
            return Err(manifest_err(&dir, format!("bad tier directory {dir_name:?}; expected base, good or staging")));
        }
    }
    for tier in Tier::ALL {
        let tier_dir = root.join(tier.dir_name());
        if !tier_dir.is_dir() {
            continue;
        }
        for (pos, plugin_dir) in sorted_subdirs(&tier_dir)?.into_iter().enumerate() {
            let path = plugin_dir.join(MANIFEST_FILE);
            let m = read_manifest(&path)?;
            if m.name.trim().is_empty() {
                return Err(manifest_err(&path, "name is empty"));
            }
            if let Some(declared) = m.tier {
                if declared != tier {
                    return Err(manifest_err(
                        &path,
                        format!("bad tier: declares {declared:?} but lives under {}", tier.dir_name()),
                    ));
                }
            }
            if m.exec.is_absolute() || m.exec.components().any(|c| matches!(c, std::path::Component::ParentDir)) {
                return Err(manifest_err(&path, "exec must be a path inside the plugin directory"));
            }
            let exec = plugin_dir.join(&m.exec);
            let runnable =
                fs::metadata(&exec).map(|md| md.is_file() && md.permissions().mode() & 0o111 != 0).unwrap_or(false);
            if !runnable {
                return Err(manifest_err(&path, format!("exec {} is not an executable file", exec.display())));
            }
            // an operator override in the config wins over the manifest
            let timeout = config
                .module_timeouts
                .get(&m.name)
                .copied()
                .or(m.timeout_seconds)
                .unwrap_or(config.default_timeout_seconds);
            if timeout == 0 {
                return Err(manifest_err(&path, "timeout_seconds must be positive"));
            }
            let explicit_index = m.order_index.is_some();
            out.push((
                PluginDescriptor {
                    name: m.name,
                    tier,
                    group: m.group,
                    kind: PluginKind::External,
                    exec_path: Some(exec),
                    timeout_seconds: timeout,
                    enabled: true,
                    order_index: m.order_index.unwrap_or(EXTERNAL_INDEX_BASE + pos as u32),
                },
                explicit_index,
            ));
        }
    }
    Ok(out)
}

/// Built-ins first, then externals found under `root/{base,good,staging}`,
/// then `config.module_toggles` applied. A missing `root` means no externals.
/// An external post-build plugin named after a platform module takes the
/// stub's place and order index unless its manifest sets one.
pub fn load_store(root: &Path, config: &ServiceConfig) -> Result<PluginStore, StoreError> {
    let mut all: Vec<PluginDescriptor> = builtin_table()
        .into_iter()
        .map(|(idx, name, group)| PluginDescriptor {
            name: name.to_owned(),
            tier: Tier::Base,
            group,
            kind: PluginKind::Builtin,
            exec_path: None,
            timeout_seconds: config.timeout_for(name),
            enabled: true,
            order_index: idx,
        })
        .collect();
    for (ext, explicit_index) in external_descriptors(root, config)? {
        // a real platform module replaces the built-in stub of the same name
        let stub = all.iter().position(|d| {
            d.kind == PluginKind::Builtin && d.name == ext.name && PLATFORM_MODULES.contains(&d.name.as_str())
        });
        match stub {
            Some(i) if ext.group == PluginGroup::PostBuild => {
                let stub_index = all.remove(i).order_index;
                let order_index = if explicit_index { ext.order_index } else { stub_index };
                all.push(PluginDescriptor { order_index, ..ext });
            }
            _ => all.push(ext),
        }
    }
    PluginStore::from_descriptors(all)?.with_toggles(&config.module_toggles)
}
