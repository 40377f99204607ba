//! Native checks. Each is a pure function of the change set and its
//! parameters; boundaries are strict-greater.

use std::sync::OnceLock;

use regex::Regex;

use super::changeset::ChangeSet;
use crate::model::{CheckResult, CheckStatus};

pub const SIGNED_OFF: &str = "signed-off";
pub const NOBODY: &str = "nobody";
pub const NEWLINE: &str = "newline";
pub const FILE_SIZE: &str = "file-size";
pub const HARDCODED_PATH: &str = "hardcoded-path";
pub const EXECUTABLE: &str = "executable";
pub const TIMESTAMP: &str = "timestamp";
pub const INDENT: &str = "indent";

fn verdict(name: &str, offenders: Vec<String>, what: &str) -> CheckResult {
    if offenders.is_empty() {
        CheckResult::new(name, CheckStatus::Pass, 0, "")
    } else {
        CheckResult::new(name, CheckStatus::Fail, 0, format!("{what}:\n{}\n", offenders.join("\n")))
    }
}

fn signed_off_line() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^Signed-off-by: .+ <.+@.+>$").unwrap())
}

pub fn check_signed_off(changes: &ChangeSet) -> CheckResult {
    let offenders = changes
        .commits
        .iter()
        .filter(|c| !c.message.lines().any(|l| signed_off_line().is_match(l)))
        .map(|c| c.sha.clone())
        .collect();
    verdict(SIGNED_OFF, offenders, "commits without a Signed-off-by line")
}

pub fn check_nobody(changes: &ChangeSet) -> CheckResult {
    let offenders = changes
        .commits
        .iter()
        .filter_map(|c| {
            let subject = c.message.lines().next().unwrap_or("");
            let mut missing = Vec::new();
            if subject.trim().is_empty() {
                missing.push("subject");
            }
            if c.author_name.trim().is_empty() {
                missing.push("author name");
            }
            if c.author_email.trim().is_empty() {
                missing.push("author email");
            }
            (!missing.is_empty()).then(|| format!("{} (empty {})", c.sha, missing.join(", ")))
        })
        .collect();
    verdict(NOBODY, offenders, "commits with missing metadata")
}

pub fn check_newline(changes: &ChangeSet) -> CheckResult {
    let offenders = changes
        .changed_files
        .iter()
        .filter(|f| !f.is_binary() && f.last_byte.is_some_and(|b| b != b'\n'))
        .map(|f| f.path.clone())
        .collect();
    verdict(NEWLINE, offenders, "files not ending in a newline")
}

pub fn check_file_size(changes: &ChangeSet, limit: u64) -> CheckResult {
    let offenders = changes
        .changed_files
        .iter()
        .filter(|f| f.size > limit)
        .map(|f| format!("{} ({} bytes > {limit})", f.path, f.size))
        .collect();
    verdict(FILE_SIZE, offenders, "files over the size limit")
}

pub fn check_hardcoded_paths(changes: &ChangeSet, patterns: &[String]) -> CheckResult {
    let mut offenders = Vec::new();
    for f in changes.changed_files.iter().filter(|f| !f.is_binary()) {
        for (line_no, text) in &f.added_lines {
            if patterns.iter().any(|p| !p.is_empty() && text.contains(p.as_str())) {
                offenders.push(format!("{}:{line_no}", f.path));
            }
        }
    }
    verdict(HARDCODED_PATH, offenders, "hard-coded paths")
}

pub fn check_executable(changes: &ChangeSet, allowed_extensions: &[String]) -> CheckResult {
    let offenders = changes
        .changed_files
        .iter()
        .filter(|f| f.is_executable())
        .filter(|f| !f.head.starts_with(b"#!"))
        .filter(|f| !allowed_extensions.iter().any(|ext| f.path.ends_with(ext.as_str())))
        .map(|f| format!("{} (mode {:o})", f.path, f.mode))
        .collect();
    verdict(EXECUTABLE, offenders, "executable files without an interpreter line")
}

pub fn check_timestamp(changes: &ChangeSet, skew_seconds: u64, now_unix: i64) -> CheckResult {
    let limit = now_unix.saturating_add(skew_seconds as i64);
    let offenders = changes
        .commits
        .iter()
        .filter(|c| c.author_timestamp > limit)
        .map(|c| format!("{} (authored at {}, now {now_unix})", c.sha, c.author_timestamp))
        .collect();
    verdict(TIMESTAMP, offenders, "future-dated commits")
}

/// True when the leading whitespace of `line` has a tab right after a space.
pub fn mixed_indent(line: &str) -> bool {
    let lead = line.len() - line.trim_start_matches([' ', '\t']).len();
    line[..lead].contains(" \t")
}

/// Fallback used when no formatter is configured.
pub fn check_indent(changes: &ChangeSet) -> CheckResult {
    let mut offenders = Vec::new();
    for f in changes.changed_files.iter().filter(|f| !f.is_binary()) {
        for (line_no, text) in &f.added_lines {
            if mixed_indent(text) {
                offenders.push(format!("{}:{line_no}", f.path));
            }
        }
    }
    verdict(INDENT, offenders, "space followed by tab in indentation")
}
