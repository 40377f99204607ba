//! Fixture corpus format for the built-in checks.
//!
//! Each case is a JSON file under `<corpus>/<rule>/`. File contents are
//! given as `text` or `hex`; without explicit `added_lines` every line of a
//! file counts as added. A tool program starting with `./` is resolved
//! relative to the case file.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::Deserialize;

use super::changeset::{ChangeSet, ChangedFile, CommitInfo};
use super::{rules, run_check, run_tool_wrapper, CheckContext, ToolInvocation};
use crate::config::{Thresholds, ToolSpec};
use crate::model::{CheckResult, CheckStatus};
use crate::process::NoHooks;

pub const TOOL_WRAPPER_RULE: &str = "tool-wrapper";

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseCommit {
    pub sha: String,
    #[serde(default = "default_name")]
    pub author_name: String,
    #[serde(default = "default_email")]
    pub author_email: String,
    #[serde(default)]
    pub author_timestamp: i64,
    pub message: String,
}

fn default_name() -> String {
    "Fixture Dev".into()
}
fn default_email() -> String {
    "dev@example.com".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseFile {
    pub path: String,
    /// Octal, e.g. "644".
    #[serde(default = "default_mode")]
    pub mode: String,
    pub text: Option<String>,
    pub hex: Option<String>,
    pub added_lines: Option<Vec<(u32, String)>>,
    #[serde(default)]
    pub removed_lines: Vec<(u32, String)>,
}

fn default_mode() -> String {
    "644".into()
}

impl CaseFile {
    pub fn content(&self) -> Result<Vec<u8>, String> {
        match (&self.text, &self.hex) {
            (Some(t), None) => Ok(t.clone().into_bytes()),
            (None, Some(h)) => hex::decode(h).map_err(|e| format!("{}: bad hex: {e}", self.path)),
            (None, None) => Ok(Vec::new()),
            _ => Err(format!("{}: give text or hex, not both", self.path)),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixtureCase {
    pub rule: String,
    pub expect: CheckStatus,
    #[serde(default)]
    pub description: String,
    #[serde(default)]
    pub now_unix: i64,
    #[serde(default)]
    pub thresholds: Thresholds,
    pub tool: Option<ToolSpec>,
    #[serde(default)]
    pub commits: Vec<CaseCommit>,
    #[serde(default)]
    pub files: Vec<CaseFile>,
}

impl FixtureCase {
    pub fn load(path: &Path) -> Result<Self, String> {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn change_set(&self) -> Result<ChangeSet, String> {
        let mut changed_files = Vec::new();
        for f in &self.files {
            let mode = u32::from_str_radix(&f.mode, 8).map_err(|e| format!("{}: bad mode: {e}", f.path))?;
            let mut cf = ChangedFile::from_bytes(f.path.clone(), mode, &f.content()?);
            if let Some(added) = &f.added_lines {
                cf.added_lines = added.clone();
            }
            cf.removed_lines = f.removed_lines.clone();
            changed_files.push(cf);
        }
        let commits = self
            .commits
            .iter()
            .map(|c| CommitInfo {
                sha: c.sha.clone(),
                author_name: c.author_name.clone(),
                author_email: c.author_email.clone(),
                author_timestamp: c.author_timestamp,
                message: c.message.clone(),
            })
            .collect();
        Ok(ChangeSet { changed_files, commits })
    }

    /// Materializes the files under `workspace` and runs the rule.
    pub fn run(&self, case_dir: &Path, workspace: &Path) -> Result<CheckResult, String> {
        let changes = self.change_set()?;
        for f in &self.files {
            let p = workspace.join(&f.path);
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| e.to_string())?;
            }
            fs::write(&p, f.content()?).map_err(|e| e.to_string())?;
        }
        let invocation = ToolInvocation {
            workspace,
            report_dir: workspace,
            timeout: Duration::from_secs(30),
            grace: Duration::from_secs(1),
            env: Vec::new(),
            hooks: &NoHooks,
        };
        let mut tools = std::collections::BTreeMap::new();
        if let Some(spec) = &self.tool {
            let mut spec = spec.clone();
            if let Some(rel) = spec.program.strip_prefix("./") {
                spec.program = case_dir.join(rel).to_string_lossy().into_owned();
            }
            tools.insert(self.tool_key(), spec);
        }
        if self.rule == TOOL_WRAPPER_RULE {
            let spec = tools.get(TOOL_WRAPPER_RULE).ok_or("tool-wrapper case needs a tool")?;
            return Ok(run_tool_wrapper(TOOL_WRAPPER_RULE, spec, &changes, &invocation));
        }
        let ctx = CheckContext {
            changes: &changes,
            thresholds: &self.thresholds,
            tools: &tools,
            now_unix: self.now_unix,
            invocation,
        };
        run_check(&self.rule, &ctx).ok_or_else(|| format!("unknown rule {}", self.rule))
    }

    fn tool_key(&self) -> String {
        if self.rule == rules::INDENT {
            rules::INDENT.into()
        } else {
            TOOL_WRAPPER_RULE.into()
        }
    }
}

/// Every `*.json` case under `root`, sorted by path.
pub fn discover(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let Ok(rules) = fs::read_dir(root) else {
        return out;
    };
    for rule in rules.flatten() {
        if let Ok(cases) = fs::read_dir(rule.path()) {
            out.extend(cases.flatten().map(|e| e.path()).filter(|p| p.extension().is_some_and(|x| x == "json")));
        }
    }
    out.sort();
    out
}

/// The rules the corpus must cover: every native check plus the tool wrapper.
pub fn required_rules() -> Vec<&'static str> {
    let mut r: Vec<&str> = super::NATIVE_CHECKS.to_vec();
    r.push(TOOL_WRAPPER_RULE);
    r
}
