//! Wrapper for checks backed by an external analysis tool.

use std::collections::BTreeMap;
use std::env;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use super::changeset::ChangeSet;
use crate::config::ToolSpec;
use crate::model::{CheckResult, CheckStatus};
use crate::process::{run_supervised, RunOutcome, RunSpec, SupervisionHooks};

pub const FILES_PLACEHOLDER: &str = "{files}";

/// Where and how a tool process runs.
pub struct ToolInvocation<'a> {
    pub workspace: &'a Path,
    pub report_dir: &'a Path,
    pub timeout: Duration,
    pub grace: Duration,
    pub env: Vec<(String, String)>,
    pub hooks: &'a dyn SupervisionHooks,
}

/// Resolves `program` against `PATH` unless it already contains a slash.
pub fn find_program(program: &str) -> Option<PathBuf> {
    let is_exec = |p: &Path| p.metadata().map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0).unwrap_or(false);
    if program.contains('/') {
        let p = PathBuf::from(program);
        return is_exec(&p).then_some(p);
    }
    env::split_paths(&env::var_os("PATH")?).map(|d| d.join(program)).find(|p| is_exec(p))
}

fn expand_args(spec: &ToolSpec, files: &[String]) -> Vec<String> {
    let mut out = Vec::new();
    for a in &spec.args {
        if a == FILES_PLACEHOLDER {
            out.extend(files.iter().cloned());
        } else {
            out.push(a.clone());
        }
    }
    out
}

pub fn run_tool_wrapper(name: &str, spec: &ToolSpec, changes: &ChangeSet, inv: &ToolInvocation<'_>) -> CheckResult {
    let Some(program) = find_program(&spec.program) else {
        return CheckResult::skipped(name, "tool absent");
    };
    let files: Vec<String> = changes
        .changed_files
        .iter()
        .filter(|f| spec.extensions.is_empty() || spec.extensions.iter().any(|e| f.path.ends_with(e.as_str())))
        .map(|f| f.path.clone())
        .collect();
    if files.is_empty() {
        return CheckResult::skipped(name, "no matching files");
    }
    let run = RunSpec {
        program,
        args: expand_args(spec, &files),
        cwd: inv.workspace.to_owned(),
        env: inv.env.clone(),
        timeout: inv.timeout,
        grace: inv.grace,
        log_path: inv.report_dir.join(format!("{name}.log")),
    };
    let report = run_supervised(&run, inv.hooks);
    let ms = report.duration.as_millis() as u64;
    let status = match &report.outcome {
        RunOutcome::Exited(st) => match st.code() {
            Some(code) if spec.pass_exit_codes.as_ref().is_none_or(|ok| ok.contains(&code)) => CheckStatus::Pass,
            Some(_) => CheckStatus::Fail,
            None => CheckStatus::Crashed,
        },
        RunOutcome::TimedOut => CheckStatus::TimedOut,
        RunOutcome::Cancelled | RunOutcome::SpawnFailed(_) => CheckStatus::Crashed,
    };
    CheckResult::new(name, status, ms, report.output)
}

const C_FAMILY: &[&str] = &[".c", ".h", ".cc", ".cpp", ".cxx", ".hpp"];

fn spec(program: &str, args: &[&str], extensions: &[&str], pass_any: bool) -> ToolSpec {
    ToolSpec {
        program: program.into(),
        args: args.iter().map(|s| s.to_string()).collect(),
        pass_exit_codes: if pass_any { None } else { Some(vec![0]) },
        extensions: extensions.iter().map(|s| s.to_string()).collect(),
    }
}

/// Tool table used when the configuration does not override an entry.
pub fn default_tool_specs() -> BTreeMap<String, ToolSpec> {
    BTreeMap::from([
        ("clang-format".into(), spec("clang-format", &["--dry-run", "--Werror", FILES_PLACEHOLDER], C_FAMILY, false)),
        ("cppcheck".into(), spec("cppcheck", &["--error-exitcode=1", "--quiet", FILES_PLACEHOLDER], C_FAMILY, false)),
        ("pylint".into(), spec("pylint", &["--score=n", FILES_PLACEHOLDER], &[".py"], false)),
        ("doc-tag".into(), spec("doxygen", &["-s", "-g", "-"], C_FAMILY, false)),
        ("doc-build".into(), spec("doxygen", &[], C_FAMILY, false)),
        ("scancode".into(), spec("scancode", &["--license", "--quiet", "--json", "-", FILES_PLACEHOLDER], &[], false)),
        ("sloccount".into(), spec("sloccount", &[FILES_PLACEHOLDER], &[], true)),
        ("flawfinder".into(), spec("flawfinder", &["--error-level=4", FILES_PLACEHOLDER], C_FAMILY, false)),
    ])
}

/// Defaults overlaid with configured entries.
pub fn effective_tool_specs(configured: &BTreeMap<String, ToolSpec>) -> BTreeMap<String, ToolSpec> {
    let mut all = default_tool_specs();
    all.extend(configured.iter().map(|(k, v)| (k.clone(), v.clone())));
    all
}
