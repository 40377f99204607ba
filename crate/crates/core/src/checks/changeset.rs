//! The set of changes a pull request introduces relative to its target branch.

use std::fs;
use std::io::{Read, Seek, SeekFrom};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use crate::source::run_git;

/// How many leading bytes are kept per file; also the binary-sniff window.
pub const SNIFF_BYTES: usize = 8000;

#[derive(Debug, thiserror::Error)]
pub enum ChangeSetError {
    #[error("git {op} failed: {detail}")]
    Git { op: &'static str, detail: String },
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChangedFile {
    /// Relative to the workspace root.
    pub path: String,
    pub mode: u32,
    pub size: u64,
    /// First `SNIFF_BYTES` bytes of the content.
    pub head: Vec<u8>,
    pub last_byte: Option<u8>,
    /// (new line number, text) for lines this change adds.
    pub added_lines: Vec<(u32, String)>,
    /// (old line number, text) for lines this change removes.
    pub removed_lines: Vec<(u32, String)>,
}

impl ChangedFile {
    /// A file whose every line counts as added.
    pub fn from_bytes(path: impl Into<String>, mode: u32, content: &[u8]) -> Self {
        let mut f = Self {
            path: path.into(),
            mode,
            size: content.len() as u64,
            head: content[..content.len().min(SNIFF_BYTES)].to_vec(),
            last_byte: content.last().copied(),
            added_lines: Vec::new(),
            removed_lines: Vec::new(),
        };
        if !f.is_binary() {
            f.added_lines = String::from_utf8_lossy(content).lines().zip(1..).map(|(l, n)| (n, l.to_owned())).collect();
        }
        f
    }

    pub fn is_binary(&self) -> bool {
        self.head.contains(&0)
    }

    pub fn is_executable(&self) -> bool {
        self.mode & 0o111 != 0
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CommitInfo {
    pub sha: String,
    pub author_name: String,
    pub author_email: String,
    /// Unix seconds.
    pub author_timestamp: i64,
    pub message: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ChangeSet {
    pub changed_files: Vec<ChangedFile>,
    pub commits: Vec<CommitInfo>,
}

impl ChangeSet {
    /// Diffs `HEAD` of `workspace` against its merge base with
    /// `refs/heads/<target_branch>`. Only regular files that still exist are
    /// part of the result.
    pub fn from_workspace(workspace: &Path, target_branch: &str) -> Result<Self, ChangeSetError> {
        let target = format!("refs/heads/{target_branch}");
        let base = git(workspace, "merge-base", &["merge-base", &target, "HEAD"])?;
        let base = base.trim();
        let range = format!("{base}..HEAD");
        let commits = parse_log(&git(
            workspace,
            "log",
            &["log", "--reverse", "--format=%H%x00%an%x00%ae%x00%at%x00%B%x1e", &range],
        )?);
        let raw = git(workspace, "diff", &["diff", "--raw", "-z", "--no-renames", "--no-abbrev", base, "HEAD"])?;
        let patch = git(
            workspace,
            "diff",
            &["-c", "core.quotepath=off", "diff", "-U0", "--no-color", "--no-ext-diff", "--no-renames", base, "HEAD"],
        )?;
        let mut hunks = parse_patch(&patch);
        let mut changed_files = Vec::new();
        for (mode, path) in parse_raw(&raw) {
            let abs = workspace.join(&path);
            let (size, head, last_byte) =
                sniff(&abs).map_err(|source| ChangeSetError::Io { path: abs.clone(), source })?;
            let (added_lines, removed_lines) = hunks.remove(&path).unwrap_or_default();
            // git records only 644/755; the checkout mode is the same information
            let mode = fs::metadata(&abs).map(|m| m.permissions().mode() & 0o777).unwrap_or(mode);
            changed_files.push(ChangedFile { path, mode, size, head, last_byte, added_lines, removed_lines });
        }
        Ok(Self { changed_files, commits })
    }
}

fn git(dir: &Path, op: &'static str, args: &[&str]) -> Result<String, ChangeSetError> {
    run_git(dir, args).map_err(|detail| ChangeSetError::Git { op, detail })
}

fn sniff(path: &Path) -> std::io::Result<(u64, Vec<u8>, Option<u8>)> {
    let mut f = fs::File::open(path)?;
    let size = f.metadata()?.len();
    let mut head = Vec::new();
    (&mut f).take(SNIFF_BYTES as u64).read_to_end(&mut head)?;
    let last = if size == 0 {
        None
    } else {
        f.seek(SeekFrom::Start(size - 1))?;
        let mut b = [0u8];
        f.read_exact(&mut b)?;
        Some(b[0])
    };
    Ok((size, head, last))
}

fn parse_log(text: &str) -> Vec<CommitInfo> {
    text.split('\x1e')
        .filter_map(|rec| {
            let rec = rec.trim_start_matches('\n');
            if rec.is_empty() {
                return None;
            }
            let mut it = rec.splitn(5, '\0');
            Some(CommitInfo {
                sha: it.next()?.to_owned(),
                author_name: it.next()?.to_owned(),
                author_email: it.next()?.to_owned(),
                author_timestamp: it.next()?.parse().ok()?,
                message: it.next()?.trim_end_matches('\n').to_owned(),
            })
        })
        .collect()
}

/// Regular files added or modified, with their new mode.
fn parse_raw(text: &str) -> Vec<(u32, String)> {
    let mut out = Vec::new();
    let mut it = text.split('\0');
    while let Some(meta) = it.next() {
        let Some(path) = it.next() else { break };
        let fields: Vec<&str> = meta.trim_start_matches(':').split(' ').collect();
        if fields.len() < 5 {
            continue;
        }
        let status = fields[4];
        let mode = u32::from_str_radix(fields[1], 8).unwrap_or(0);
        if status.starts_with('D') || mode & 0o170000 != 0o100000 {
            continue;
        }
        out.push((mode & 0o777, path.to_owned()));
    }
    out
}

type LineList = Vec<(u32, String)>;

fn parse_patch(text: &str) -> std::collections::HashMap<String, (LineList, LineList)> {
    let mut out: std::collections::HashMap<String, (LineList, LineList)> = Default::default();
    let mut current: Option<String> = None;
    let mut in_hunk = false;
    let (mut old_ln, mut new_ln) = (0u32, 0u32);
    for line in text.lines() {
        if line.starts_with("diff --git ") {
            current = None;
            in_hunk = false;
            continue;
        }
        if !in_hunk {
            if let Some(p) = line.strip_prefix("+++ ") {
                current = p.strip_prefix("b/").map(str::to_owned);
                continue;
            }
        }
        if let Some(rest) = line.strip_prefix("@@ ") {
            in_hunk = true;
            let mut parts = rest.split(' ');
            old_ln = hunk_start(parts.next().unwrap_or(""));
            new_ln = hunk_start(parts.next().unwrap_or(""));
            continue;
        }
        if !in_hunk {
            continue;
        }
        let Some(path) = &current else { continue };
        let entry = out.entry(path.clone()).or_default();
        if let Some(t) = line.strip_prefix('+') {
            entry.0.push((new_ln, t.to_owned()));
            new_ln += 1;
        } else if let Some(t) = line.strip_prefix('-') {
            entry.1.push((old_ln, t.to_owned()));
            old_ln += 1;
        }
    }
    out
}

fn hunk_start(range: &str) -> u32 {
    range[1.min(range.len())..].split(',').next().and_then(|n| n.parse().ok()).unwrap_or(0)
}
