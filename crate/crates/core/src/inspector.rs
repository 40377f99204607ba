//! Runs a task's pipeline: the pre-build group first, gating the post-build
//! group, with every plugin supervised in its own process group.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use crate::builder::{outcome_status, BuildInvocation, Builder};
use crate::checks::{self, ChangeSet, CheckContext, ToolInvocation};
use crate::clock::unix_seconds;
use crate::config::{Thresholds, ToolSpec};
use crate::model::{
    CheckResult, CheckStatus, PipelineResult, PipelineVerdict, PluginDescriptor, PluginGroup, PluginKind, PrTask,
};
use crate::modulator::{status_for, AgingTracker, CodeHost, PluginStore, StatusState, PLATFORM_MODULES};
use crate::process::{run_supervised, terminate_group, RunSpec, SupervisionHooks};

#[derive(Debug, thiserror::Error)]
pub enum InspectorError {
    #[error("workspace {0} does not exist")]
    WorkspaceMissing(PathBuf),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PipelineOptions {
    /// Stop the pre-build group at the first blocking failure and skip the
    /// post-build group. Off reproduces a gate-less baseline.
    pub gate_postbuild: bool,
    /// Upper bound on post-build modules running at once.
    pub post_parallelism: usize,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self { gate_postbuild: true, post_parallelism: crate::config::DEFAULT_MAX_RUN_QUEUE }
    }
}

pub struct Inspector {
    pub store: Arc<PluginStore>,
    pub thresholds: Thresholds,
    /// Effective tool table.
    pub tools: BTreeMap<String, ToolSpec>,
    pub builder: Arc<Builder>,
    pub code_host: Arc<dyn CodeHost>,
    pub aging: Option<Arc<AgingTracker>>,
    /// Per-task report directories live under here.
    pub reports_dir: PathBuf,
    pub kill_grace: Duration,
    pub options: PipelineOptions,
}

/// Per-plugin invocation context.
pub struct PluginContext<'a> {
    pub task: &'a PrTask,
    pub workspace: &'a Path,
    pub group: PluginGroup,
    pub report_root: &'a Path,
    pub build_root: Option<&'a Path>,
    pub changes: &'a Result<ChangeSet, String>,
    pub hooks: &'a dyn SupervisionHooks,
}

/// The environment every plugin process receives.
pub fn plugin_env(
    task: &PrTask,
    workspace: &Path,
    group: PluginGroup,
    report_dir: &Path,
    build_root: Option<&Path>,
) -> Vec<(String, String)> {
    let mut env = vec![
        ("CI_WORKSPACE".to_owned(), workspace.to_string_lossy().into_owned()),
        ("CI_REPO".to_owned(), task.repo_id.clone()),
        ("CI_PR_NUMBER".to_owned(), task.pr_number.to_string()),
        ("CI_HEAD_SHA".to_owned(), task.head_commit.as_str().to_owned()),
        ("CI_GROUP".to_owned(), group.env_value().to_owned()),
        ("CI_REPORT_DIR".to_owned(), report_dir.to_string_lossy().into_owned()),
    ];
    if let Some(root) = build_root {
        env.push(("CI_BUILD_ROOT".to_owned(), root.to_string_lossy().into_owned()));
    }
    env
}

fn files_in(dir: &Path) -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map(|it| it.flatten().map(|e| e.path()).filter(|p| p.is_file()).collect())
        .unwrap_or_default();
    out.sort();
    out
}

impl Inspector {
    pub fn report_root(&self, task: &PrTask) -> PathBuf {
        self.reports_dir.join(task.task_id.to_string())
    }

    pub fn run_plugin(&self, desc: &PluginDescriptor, ctx: &PluginContext<'_>) -> CheckResult {
        let report_dir = ctx.report_root.join(&desc.name);
        let log_path = ctx.report_root.join(format!("{}.log", desc.name));
        if let Err(e) = fs::create_dir_all(&report_dir) {
            let mut r = CheckResult::new(&desc.name, CheckStatus::Crashed, 0, format!("cannot create report dir: {e}"));
            r.blocking = desc.is_blocking();
            return r;
        }
        let env = plugin_env(ctx.task, ctx.workspace, ctx.group, &report_dir, ctx.build_root);
        let timeout = Duration::from_secs(desc.timeout_seconds);
        let mut result = match desc.kind {
            PluginKind::External => {
                let spec = RunSpec {
                    program: desc.exec_path.clone().unwrap_or_default(),
                    args: Vec::new(),
                    cwd: ctx.workspace.to_owned(),
                    env,
                    timeout,
                    grace: self.kill_grace,
                    log_path,
                };
                let report = run_supervised(&spec, ctx.hooks);
                let mut r = CheckResult::new(
                    &desc.name,
                    outcome_status(&report.outcome),
                    report.duration.as_millis() as u64,
                    report.output,
                );
                r.artifact_paths = files_in(&report_dir);
                r
            }
            PluginKind::Builtin if PLATFORM_MODULES.contains(&desc.name.as_str()) => match ctx.build_root {
                Some(root) => {
                    let inv = BuildInvocation {
                        root,
                        workspace: ctx.workspace,
                        env,
                        timeout,
                        grace: self.kill_grace,
                        log_path,
                        hooks: ctx.hooks,
                    };
                    self.builder.run_stub_module(&desc.name, ctx.task, &inv)
                }
                None => CheckResult::new(&desc.name, CheckStatus::Crashed, 0, "no build root prepared"),
            },
            PluginKind::Builtin => match ctx.changes {
                Err(e) => CheckResult::new(&desc.name, CheckStatus::Crashed, 0, format!("cannot compute changes: {e}")),
                Ok(changes) => {
                    let cctx = CheckContext {
                        changes,
                        thresholds: &self.thresholds,
                        tools: &self.tools,
                        now_unix: unix_seconds(),
                        invocation: ToolInvocation {
                            workspace: ctx.workspace,
                            report_dir: ctx.report_root,
                            timeout,
                            grace: self.kill_grace,
                            env,
                            hooks: ctx.hooks,
                        },
                    };
                    checks::run_check(&desc.name, &cctx).unwrap_or_else(|| {
                        CheckResult::new(&desc.name, CheckStatus::Crashed, 0, "no such built-in check")
                    })
                }
            },
        };
        result.blocking = desc.is_blocking();
        result
    }

    fn report(&self, task: &PrTask, plugin: &str, state: StatusState, description: &str) {
        if let Err(e) =
            self.code_host.report(&task.repo_id, task.head_commit.as_str(), plugin, state, description, None)
        {
            log::warn!("task {}: status report for {plugin} failed: {e}", task.task_id);
        }
    }

    fn run_reported(&self, desc: &PluginDescriptor, ctx: &PluginContext<'_>) -> CheckResult {
        self.report(ctx.task, &desc.name, StatusState::Pending, "running");
        let result = self.run_plugin(desc, ctx);
        let (state, description) = status_for(&result);
        self.report(ctx.task, &desc.name, state, &description);
        if let Some(aging) = &self.aging {
            if let Err(e) = aging.record_aging(&desc.name, &result) {
                log::warn!("aging record for {}: {e}", desc.name);
            }
        }
        result
    }

    /// Runs the post-build plan on up to `post_parallelism` threads; results
    /// keep plan order.
    fn run_postbuild(&self, plan: &[PluginDescriptor], ctx: &PluginContext<'_>) -> Vec<CheckResult> {
        let lanes = self.options.post_parallelism.max(1).min(plan.len());
        let next = AtomicUsize::new(0);
        let slots: Mutex<Vec<Option<CheckResult>>> = Mutex::new(vec![None; plan.len()]);
        thread::scope(|s| {
            for _ in 0..lanes {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(desc) = plan.get(i) else { break };
                    let r = if ctx.hooks.cancelled() {
                        CheckResult::skipped(&desc.name, "task cancelled")
                    } else {
                        self.run_reported(desc, ctx)
                    };
                    slots.lock().unwrap()[i] = Some(r);
                });
            }
        });
        slots.into_inner().unwrap().into_iter().map(|r| r.expect("every slot filled")).collect()
    }

    /// Executes the pipeline for `task` in `workspace`.
    pub fn run_pipeline(
        &self,
        task: &PrTask,
        workspace: &Path,
        hooks: &dyn SupervisionHooks,
    ) -> Result<PipelineResult, InspectorError> {
        if !workspace.is_dir() {
            return Err(InspectorError::WorkspaceMissing(workspace.to_owned()));
        }
        let report_root = self.report_root(task);
        let _ = fs::create_dir_all(&report_root);
        let pre_plan = self.store.execution_plan(PluginGroup::PreBuild);
        let needs_changes = pre_plan.iter().any(|d| d.kind == PluginKind::Builtin);
        let changes = if needs_changes {
            ChangeSet::from_workspace(workspace, &task.target_branch).map_err(|e| e.to_string())
        } else {
            Ok(ChangeSet::default())
        };
        let mut ctx = PluginContext {
            task,
            workspace,
            group: PluginGroup::PreBuild,
            report_root: &report_root,
            build_root: None,
            changes: &changes,
            hooks,
        };

        let killed = |pre: Vec<CheckResult>, post: Vec<CheckResult>| {
            Ok(PipelineResult::new(task.task_id, pre, post, PipelineVerdict::Killed))
        };

        let mut pre = Vec::new();
        let mut pre_failed = false;
        for desc in &pre_plan {
            if hooks.cancelled() {
                return killed(pre, Vec::new());
            }
            let r = self.run_reported(desc, &ctx);
            let gates = r.gates();
            pre.push(r);
            if gates {
                pre_failed = true;
                if self.options.gate_postbuild {
                    break;
                }
            }
        }
        if hooks.cancelled() {
            return killed(pre, Vec::new());
        }

        let mut post = Vec::new();
        if !(pre_failed && self.options.gate_postbuild) {
            let post_plan = self.store.execution_plan(PluginGroup::PostBuild);
            if !post_plan.is_empty() {
                let platforms: Vec<String> = post_plan.iter().map(|d| d.name.clone()).collect();
                match self.builder.prepare_build_root(task, workspace, &platforms) {
                    Ok(root) => {
                        ctx.group = PluginGroup::PostBuild;
                        ctx.build_root = Some(&root);
                        post = self.run_postbuild(&post_plan, &ctx);
                    }
                    Err(e) => {
                        post = post_plan
                            .iter()
                            .map(|d| {
                                let mut r = CheckResult::new(&d.name, CheckStatus::Crashed, 0, e.to_string());
                                r.blocking = d.is_blocking();
                                r
                            })
                            .collect();
                    }
                }
            }
        }
        if hooks.cancelled() {
            return killed(pre, post);
        }

        let verdict = if pre_failed {
            PipelineVerdict::PrebuildFailed
        } else if post.iter().any(CheckResult::gates) {
            PipelineVerdict::PostbuildFailed
        } else {
            PipelineVerdict::Success
        };
        let result = PipelineResult::new(task.task_id, pre, post, verdict);
        if verdict != PipelineVerdict::Success {
            self.comment_failure(task, &result);
        }
        Ok(result)
    }

    fn comment_failure(&self, task: &PrTask, result: &PipelineResult) {
        let failing: Vec<String> =
            result.results().filter(|r| r.gates()).map(|r| format!("- {} ({:?})", r.plugin_name, r.status)).collect();
        let body = format!(
            "Inspection of {} finished with {:?}.\n\nFailing modules:\n{}\n",
            task.head_commit.as_str(),
            result.verdict,
            failing.join("\n")
        );
        if let Err(e) = self.code_host.comment(&task.repo_id, task.pr_number, &body) {
            log::warn!("task {}: summary comment failed: {e}", task.task_id);
        }
    }
}

/// Signals every registered process group of `task` (polite, grace, force)
/// and empties the registry.
pub fn terminate_task_processes(task: &mut PrTask, grace: Duration) {
    let groups: Vec<_> = std::mem::take(&mut task.child_process_ids).into_iter().collect();
    thread::scope(|s| {
        for pgid in groups {
            s.spawn(move || terminate_group(pgid, grace));
        }
    });
}
