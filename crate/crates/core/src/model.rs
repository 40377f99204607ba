//! Domain types shared by every subsystem: webhook events, the task state
//! machine, plugin descriptors and check/pipeline results.

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TaskId = u64;

/// Nanoseconds on the owning [`crate::clock::Clock`].
pub type Timestamp = u64;

/// Upper bound on a plugin report, in bytes, including [`TRUNCATION_MARKER`].
pub const REPORT_LIMIT_BYTES: usize = 64 * 1024;
pub const TRUNCATION_MARKER: &str = "[truncated]";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("invalid commit id {0:?}: expected 40 lowercase hex characters")]
    InvalidCommit(String),
    #[error("pr_number must be >= 1")]
    InvalidPrNumber,
    #[error("unknown task state {0:?}")]
    UnknownState(String),
    #[error("illegal transition {from} -> {to}")]
    IllegalTransition { from: TaskState, to: TaskState },
}

/// A full 40-character lowercase hex commit id.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct CommitId(String);

impl CommitId {
    pub fn parse(s: &str) -> Result<Self, ModelError> {
        let ok = s.len() == 40 && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'));
        if ok {
            Ok(Self(s.to_owned()))
        } else {
            Err(ModelError::InvalidCommit(s.to_owned()))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for CommitId {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::parse(&s)
    }
}

impl From<CommitId> for String {
    fn from(c: CommitId) -> Self {
        c.0
    }
}

impl fmt::Display for CommitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PrAction {
    Opened,
    Synchronized,
    Closed,
}

/// A parsed pull-request webhook notification.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrEvent {
    pub repo_id: String,
    pub pr_number: u64,
    pub action: PrAction,
    pub head_commit: CommitId,
    pub source_branch: String,
    pub target_branch: String,
    pub clone_url: String,
    pub delivery_id: String,
    pub received_at: Timestamp,
}

impl PrEvent {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.pr_number == 0 {
            return Err(ModelError::InvalidPrNumber);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ExitVerdict {
    Pass,
    Fail,
    Killed,
}

/// Lifecycle state of a [`PrTask`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum TaskState {
    Ready,
    Run,
    Wait,
    Hanging,
    Exit(ExitVerdict),
}

impl TaskState {
    pub const ALL: [TaskState; 7] = [
        TaskState::Ready,
        TaskState::Run,
        TaskState::Wait,
        TaskState::Hanging,
        TaskState::Exit(ExitVerdict::Pass),
        TaskState::Exit(ExitVerdict::Fail),
        TaskState::Exit(ExitVerdict::Killed),
    ];

    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Exit(_))
    }

    /// Ready, Run, Wait and Hanging are live.
    pub fn is_live(self) -> bool {
        !self.is_terminal()
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskState::Ready => f.write_str("Ready"),
            TaskState::Run => f.write_str("Run"),
            TaskState::Wait => f.write_str("Wait"),
            TaskState::Hanging => f.write_str("Hanging"),
            TaskState::Exit(v) => write!(f, "Exit({v:?})"),
        }
    }
}

impl FromStr for TaskState {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "Ready" => TaskState::Ready,
            "Run" => TaskState::Run,
            "Wait" => TaskState::Wait,
            "Hanging" => TaskState::Hanging,
            "Exit(Pass)" => TaskState::Exit(ExitVerdict::Pass),
            "Exit(Fail)" => TaskState::Exit(ExitVerdict::Fail),
            "Exit(Killed)" => TaskState::Exit(ExitVerdict::Killed),
            other => return Err(ModelError::UnknownState(other.to_owned())),
        })
    }
}

impl TryFrom<String> for TaskState {
    type Error = ModelError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<TaskState> for String {
    fn from(s: TaskState) -> Self {
        s.to_string()
    }
}

/// Returns true iff `from -> to` is one of the eight legal edges of the task
/// state machine. Cancellation from any live state routes through Hanging,
/// and Hanging may only end in `Exit(Killed)`.
pub fn validate_transition(from: TaskState, to: TaskState) -> bool {
    use ExitVerdict::*;
    use TaskState::*;
    matches!(
        (from, to),
        (Ready, Run)
            | (Run, Wait)
            | (Wait, Run)
            | (Run, Exit(Pass))
            | (Run, Exit(Fail))
            | (Ready, Hanging)
            | (Run, Hanging)
            | (Wait, Hanging)
            | (Hanging, Exit(Killed))
    )
}

/// A schedulable unit of CI work for one generation of one pull request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrTask {
    pub task_id: TaskId,
    pub repo_id: String,
    pub pr_number: u64,
    pub generation: u32,
    pub head_commit: CommitId,
    pub source_branch: String,
    pub target_branch: String,
    pub state: TaskState,
    pub priority: i32,
    pub submitted_at: Timestamp,
    pub started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
    pub workspace_path: Option<PathBuf>,
    pub child_process_ids: BTreeSet<i32>,
    pub pipeline_result: Option<PipelineResult>,
}

impl PrTask {
    pub fn from_event(task_id: TaskId, generation: u32, event: &PrEvent, now: Timestamp) -> Self {
        Self {
            task_id,
            repo_id: event.repo_id.clone(),
            pr_number: event.pr_number,
            generation,
            head_commit: event.head_commit.clone(),
            source_branch: event.source_branch.clone(),
            target_branch: event.target_branch.clone(),
            state: TaskState::Ready,
            priority: 0,
            submitted_at: now,
            started_at: None,
            finished_at: None,
            workspace_path: None,
            child_process_ids: BTreeSet::new(),
            pipeline_result: None,
        }
    }

    /// Applies a guarded state change. Entering `Run` for the first time
    /// stamps `started_at`; entering `Exit` stamps `finished_at`.
    pub fn transition(&mut self, to: TaskState, now: Timestamp) -> Result<(), ModelError> {
        if !validate_transition(self.state, to) {
            return Err(ModelError::IllegalTransition { from: self.state, to });
        }
        if to == TaskState::Run && self.started_at.is_none() {
            self.started_at = Some(now);
        }
        if to.is_terminal() {
            self.finished_at = Some(now);
            self.child_process_ids.clear();
        }
        self.state = to;
        Ok(())
    }

    pub fn pr_key(&self) -> (String, u64) {
        (self.repo_id.clone(), self.pr_number)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Base,
    Good,
    Staging,
}

impl Tier {
    pub const ALL: [Tier; 3] = [Tier::Base, Tier::Good, Tier::Staging];

    pub fn dir_name(self) -> &'static str {
        match self {
            Tier::Base => "base",
            Tier::Good => "good",
            Tier::Staging => "staging",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PluginGroup {
    #[serde(rename = "pre")]
    PreBuild,
    #[serde(rename = "post")]
    PostBuild,
}

impl PluginGroup {
    pub fn env_value(self) -> &'static str {
        match self {
            PluginGroup::PreBuild => "pre",
            PluginGroup::PostBuild => "post",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PluginKind {
    Builtin,
    External,
}

/// One check module known to the plugin store.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PluginDescriptor {
    pub name: String,
    pub tier: Tier,
    pub group: PluginGroup,
    pub kind: PluginKind,
    pub exec_path: Option<PathBuf>,
    pub timeout_seconds: u64,
    pub enabled: bool,
    pub order_index: u32,
}

impl PluginDescriptor {
    /// Staging plugins are advisory; their failures never gate a pipeline.
    pub fn is_blocking(&self) -> bool {
        self.tier != Tier::Staging
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CheckStatus {
    Pass,
    Fail,
    Skipped,
    TimedOut,
    Crashed,
}

impl CheckStatus {
    pub fn is_failure(self) -> bool {
        matches!(self, CheckStatus::Fail | CheckStatus::TimedOut | CheckStatus::Crashed)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub plugin_name: String,
    pub status: CheckStatus,
    pub duration_ms: u64,
    pub report_text: String,
    pub artifact_paths: Vec<PathBuf>,
    /// False for Staging-tier plugins.
    #[serde(default = "default_true")]
    pub blocking: bool,
}

fn default_true() -> bool {
    true
}

impl CheckResult {
    pub fn new(
        plugin_name: impl Into<String>,
        status: CheckStatus,
        duration_ms: u64,
        report: impl Into<String>,
    ) -> Self {
        Self {
            plugin_name: plugin_name.into(),
            status,
            duration_ms,
            report_text: truncate_report(report.into()),
            artifact_paths: Vec::new(),
            blocking: true,
        }
    }

    pub fn skipped(plugin_name: impl Into<String>, reason: impl Into<String>) -> Self {
        Self::new(plugin_name, CheckStatus::Skipped, 0, reason)
    }

    /// True when this result should stop the pipeline.
    pub fn gates(&self) -> bool {
        self.blocking && self.status.is_failure()
    }
}

/// Cuts `text` to [`REPORT_LIMIT_BYTES`] on a char boundary, ending with the
/// truncation marker when anything was dropped.
pub fn truncate_report(mut text: String) -> String {
    if text.len() <= REPORT_LIMIT_BYTES {
        return text;
    }
    let mut cut = REPORT_LIMIT_BYTES - TRUNCATION_MARKER.len();
    while !text.is_char_boundary(cut) {
        cut -= 1;
    }
    text.truncate(cut);
    text.push_str(TRUNCATION_MARKER);
    text
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PipelineVerdict {
    Success,
    PrebuildFailed,
    PostbuildFailed,
    Killed,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineResult {
    pub task_id: TaskId,
    pub prebuild_results: Vec<CheckResult>,
    pub postbuild_results: Vec<CheckResult>,
    pub verdict: PipelineVerdict,
    /// Module invocations actually executed (Skipped excluded).
    pub cpu_proxy: u64,
}

impl PipelineResult {
    pub fn new(
        task_id: TaskId,
        prebuild_results: Vec<CheckResult>,
        postbuild_results: Vec<CheckResult>,
        verdict: PipelineVerdict,
    ) -> Self {
        let cpu_proxy =
            prebuild_results.iter().chain(&postbuild_results).filter(|r| r.status != CheckStatus::Skipped).count()
                as u64;
        Self { task_id, prebuild_results, postbuild_results, verdict, cpu_proxy }
    }

    pub fn results(&self) -> impl Iterator<Item = &CheckResult> {
        self.prebuild_results.iter().chain(&self.postbuild_results)
    }

    pub fn exit_verdict(&self) -> ExitVerdict {
        match self.verdict {
            PipelineVerdict::Success => ExitVerdict::Pass,
            PipelineVerdict::Killed => ExitVerdict::Killed,
            PipelineVerdict::PrebuildFailed | PipelineVerdict::PostbuildFailed => ExitVerdict::Fail,
        }
    }
}
