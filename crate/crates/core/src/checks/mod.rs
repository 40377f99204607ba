//! Built-in checks: native rules plus a wrapper for external analysis tools.

pub mod changeset;
pub mod corpus;
pub mod rules;
pub mod tools;

use std::collections::BTreeMap;
use std::time::Instant;

pub use changeset::{ChangeSet, ChangeSetError, ChangedFile, CommitInfo};
pub use tools::{default_tool_specs, effective_tool_specs, find_program, run_tool_wrapper, ToolInvocation};

use crate::config::{Thresholds, ToolSpec};
use crate::model::CheckResult;

/// Checks implemented natively, by module name.
pub const NATIVE_CHECKS: [&str; 8] = [
    rules::INDENT,
    rules::FILE_SIZE,
    rules::NEWLINE,
    rules::NOBODY,
    rules::SIGNED_OFF,
    rules::HARDCODED_PATH,
    rules::EXECUTABLE,
    rules::TIMESTAMP,
];

/// Checks that delegate to an external tool.
pub const TOOL_CHECKS: [&str; 8] =
    ["clang-format", "cppcheck", "pylint", "doc-tag", "doc-build", "scancode", "sloccount", "flawfinder"];

pub struct CheckContext<'a> {
    pub changes: &'a ChangeSet,
    pub thresholds: &'a Thresholds,
    /// Effective tool table (see [`effective_tool_specs`]).
    pub tools: &'a BTreeMap<String, ToolSpec>,
    pub now_unix: i64,
    pub invocation: ToolInvocation<'a>,
}

/// Runs the built-in check called `name`; `None` if there is no such check.
pub fn run_check(name: &str, ctx: &CheckContext<'_>) -> Option<CheckResult> {
    let start = Instant::now();
    let t = ctx.thresholds;
    let c = ctx.changes;
    let mut result = match name {
        rules::SIGNED_OFF => rules::check_signed_off(c),
        rules::NOBODY => rules::check_nobody(c),
        rules::NEWLINE => rules::check_newline(c),
        rules::FILE_SIZE => rules::check_file_size(c, t.file_size_limit_bytes),
        rules::HARDCODED_PATH => rules::check_hardcoded_paths(c, &t.hardcoded_path_patterns),
        rules::EXECUTABLE => rules::check_executable(c, &t.executable_extensions),
        rules::TIMESTAMP => rules::check_timestamp(c, t.timestamp_skew_seconds, ctx.now_unix),
        rules::INDENT => match ctx.tools.get(rules::INDENT) {
            Some(spec) => return Some(run_tool_wrapper(name, spec, c, &ctx.invocation)),
            None => rules::check_indent(c),
        },
        _ => {
            let spec = ctx.tools.get(name)?;
            return Some(run_tool_wrapper(name, spec, c, &ctx.invocation));
        }
    };
    result.duration_ms = start.elapsed().as_millis() as u64;
    Some(result)
}
