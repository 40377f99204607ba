//! Unified source manager: one mirror clone per repository under
//! `state_dir/clones/`, and one linked worktree per task under
//! `state_dir/workspaces/<task_id>/` sharing the clone's object store.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io;
use std::os::unix::io::AsRawFd;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::clock::unix_millis;
use crate::config::RepositoryConfig;
use crate::model::{CommitId, PrTask, TaskId};

#[derive(Debug, Error)]
pub enum SourceError {
    #[error("clone of {repo} failed: {diagnostics}")]
    CloneFailed { repo: String, diagnostics: String },
    #[error("fetch of {repo} failed: {diagnostics}")]
    FetchFailed { repo: String, diagnostics: String },
    #[error("commit {0} not found after fetch")]
    UnknownCommit(CommitId),
    #[error("lock on {repo} not acquired within {waited:?}")]
    LockTimeout { repo: String, waited: Duration },
    #[error("repository {0} is not configured")]
    UnknownRepository(String),
    #[error("git {args}: {diagnostics}")]
    Git { args: String, diagnostics: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Workspace {
    pub task_id: TaskId,
    pub repo_id: String,
    pub path: PathBuf,
    pub head_commit: CommitId,
    /// Unix milliseconds.
    pub derived_at: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LockEvent {
    /// The lock is held elsewhere and the caller is about to block.
    Waiting,
    /// The lock was acquired after waiting.
    Acquired,
}

/// Supplies per-task working trees.
pub trait WorkspaceProvider: Send + Sync {
    fn derive(&self, task: &PrTask, on_lock: &dyn Fn(LockEvent)) -> Result<Workspace, SourceError>;
    fn release(&self, task_id: TaskId);
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SourceStats {
    pub full_clones: u64,
    pub fetches: u64,
}

/// Exclusive advisory file lock; released on drop.
#[derive(Debug)]
pub struct RepoLock {
    _file: File,
}

impl RepoLock {
    fn try_acquire(path: &Path) -> io::Result<Option<Self>> {
        let file = OpenOptions::new().create(true).truncate(false).write(true).open(path)?;
        // SAFETY: fd is valid for the lifetime of `file`.
        let rc = unsafe { libc::flock(file.as_raw_fd(), libc::LOCK_EX | libc::LOCK_NB) };
        if rc == 0 {
            return Ok(Some(Self { _file: file }));
        }
        let err = io::Error::last_os_error();
        if err.raw_os_error() == Some(libc::EWOULDBLOCK) {
            Ok(None)
        } else {
            Err(err)
        }
    }
}

pub struct SourceManager {
    state_dir: PathBuf,
    lock_timeout: Duration,
    repos: BTreeMap<String, RepositoryConfig>,
    live: Mutex<HashMap<TaskId, (String, PathBuf)>>,
    stats: Mutex<SourceStats>,
}

impl SourceManager {
    pub fn new(state_dir: &Path, repos: &[RepositoryConfig], lock_timeout: Duration) -> io::Result<Self> {
        fs::create_dir_all(state_dir.join("clones"))?;
        fs::create_dir_all(state_dir.join("workspaces"))?;
        Ok(Self {
            state_dir: state_dir.canonicalize()?,
            lock_timeout,
            repos: repos.iter().map(|r| (r.repo_id.clone(), r.clone())).collect(),
            live: Mutex::new(HashMap::new()),
            stats: Mutex::new(SourceStats::default()),
        })
    }

    pub fn stats(&self) -> SourceStats {
        *self.stats.lock().unwrap()
    }

    pub fn clones_dir(&self) -> PathBuf {
        self.state_dir.join("clones")
    }

    pub fn workspaces_dir(&self) -> PathBuf {
        self.state_dir.join("workspaces")
    }

    pub fn clone_path(&self, repo_id: &str) -> PathBuf {
        self.clones_dir().join(format!("{}.git", dir_key(repo_id)))
    }

    fn lock_path(&self, repo_id: &str) -> PathBuf {
        self.clones_dir().join(format!("{}.lock", dir_key(repo_id)))
    }

    fn repo(&self, repo_id: &str) -> Result<&RepositoryConfig, SourceError> {
        self.repos.get(repo_id).ok_or_else(|| SourceError::UnknownRepository(repo_id.to_owned()))
    }

    /// Blocks until the repository's fetch lock is held, reporting through
    /// `on_lock` if it had to wait.
    pub fn acquire_repo_lock(&self, repo_id: &str, on_lock: &dyn Fn(LockEvent)) -> Result<RepoLock, SourceError> {
        let path = self.lock_path(repo_id);
        if let Some(lock) = RepoLock::try_acquire(&path)? {
            return Ok(lock);
        }
        on_lock(LockEvent::Waiting);
        let start = Instant::now();
        loop {
            thread::sleep(Duration::from_millis(20));
            if let Some(lock) = RepoLock::try_acquire(&path)? {
                on_lock(LockEvent::Acquired);
                return Ok(lock);
            }
            if start.elapsed() >= self.lock_timeout {
                return Err(SourceError::LockTimeout { repo: repo_id.to_owned(), waited: start.elapsed() });
            }
        }
    }

    /// First call clones; later calls fetch incrementally.
    pub fn ensure_base_clone(&self, repo: &RepositoryConfig) -> Result<PathBuf, SourceError> {
        let _lock = self.acquire_repo_lock(&repo.repo_id, &|_| {})?;
        self.clone_or_fetch(repo)
    }

    fn clone_or_fetch(&self, repo: &RepositoryConfig) -> Result<PathBuf, SourceError> {
        let path = self.clone_path(&repo.repo_id);
        if path.join("HEAD").exists() {
            run_git(&path, &["fetch", "--prune", "--quiet", "origin"])
                .map_err(|e| SourceError::FetchFailed { repo: repo.repo_id.clone(), diagnostics: e })?;
            self.stats.lock().unwrap().fetches += 1;
            return Ok(path);
        }
        let tmp = path.with_extension("git.partial");
        let _ = fs::remove_dir_all(&tmp);
        let tmp_str = tmp.to_string_lossy().into_owned();
        run_git(&self.clones_dir(), &["clone", "--mirror", "--quiet", &repo.clone_url, &tmp_str])
            .map_err(|e| SourceError::CloneFailed { repo: repo.repo_id.clone(), diagnostics: e })?;
        fs::rename(&tmp, &path)?;
        self.stats.lock().unwrap().full_clones += 1;
        Ok(path)
    }

    fn has_commit(clone: &Path, sha: &CommitId) -> bool {
        run_git(clone, &["cat-file", "-e", &format!("{sha}^{{commit}}")]).is_ok()
    }

    /// Checks out `task.head_commit` into a fresh linked worktree.
    pub fn derive_workspace(&self, task: &PrTask, on_lock: &dyn Fn(LockEvent)) -> Result<Workspace, SourceError> {
        let repo = self.repo(&task.repo_id)?.clone();
        let path = self.workspaces_dir().join(task.task_id.to_string());
        let _lock = self.acquire_repo_lock(&repo.repo_id, on_lock)?;
        let clone = self.clone_path(&repo.repo_id);
        if !clone.join("HEAD").exists() || !Self::has_commit(&clone, &task.head_commit) {
            self.clone_or_fetch(&repo)?;
        }
        if !Self::has_commit(&clone, &task.head_commit) {
            return Err(SourceError::UnknownCommit(task.head_commit.clone()));
        }
        if path.exists() {
            let _ = run_git(&clone, &["worktree", "remove", "--force", &path.to_string_lossy()]);
            let _ = fs::remove_dir_all(&path);
            let _ = run_git(&clone, &["worktree", "prune"]);
        }
        let path_str = path.to_string_lossy().into_owned();
        run_git(&clone, &["worktree", "add", "--detach", "--force", "--quiet", &path_str, task.head_commit.as_str()])
            .map_err(|diagnostics| SourceError::Git { args: "worktree add".into(), diagnostics })?;
        if path.join(".gitmodules").exists() {
            if let Err(e) = run_git(&path, &["submodule", "update", "--init", "--quiet"]) {
                log::warn!("submodule init failed for task {}: {e}", task.task_id);
            }
        }
        self.live.lock().unwrap().insert(task.task_id, (repo.repo_id.clone(), path.clone()));
        Ok(Workspace {
            task_id: task.task_id,
            repo_id: repo.repo_id,
            path,
            head_commit: task.head_commit.clone(),
            derived_at: unix_millis(),
        })
    }

    /// Removes the task's worktree. Idempotent.
    pub fn release_workspace(&self, task_id: TaskId) {
        let entry = self.live.lock().unwrap().remove(&task_id);
        let path = self.workspaces_dir().join(task_id.to_string());
        if let Some((repo_id, path)) = &entry {
            let clone = self.clone_path(repo_id);
            match self.acquire_repo_lock(repo_id, &|_| {}) {
                Ok(_lock) => {
                    let _ = run_git(&clone, &["worktree", "remove", "--force", &path.to_string_lossy()]);
                    let _ = fs::remove_dir_all(path);
                    let _ = run_git(&clone, &["worktree", "prune"]);
                }
                Err(e) => {
                    log::warn!("releasing workspace of task {task_id} without lock: {e}");
                    let _ = fs::remove_dir_all(path);
                }
            }
        } else if path.exists() {
            let _ = fs::remove_dir_all(&path);
        }
    }

    pub fn live_workspaces(&self) -> Vec<(TaskId, PathBuf)> {
        let mut v: Vec<_> = self.live.lock().unwrap().iter().map(|(id, (_, p))| (*id, p.clone())).collect();
        v.sort();
        v
    }
}

impl WorkspaceProvider for SourceManager {
    fn derive(&self, task: &PrTask, on_lock: &dyn Fn(LockEvent)) -> Result<Workspace, SourceError> {
        self.derive_workspace(task, on_lock)
    }

    fn release(&self, task_id: TaskId) {
        self.release_workspace(task_id)
    }
}

/// Empty per-task directories, for running plugins without a repository.
pub struct ScratchWorkspaces {
    root: PathBuf,
}

impl ScratchWorkspaces {
    pub fn new(state_dir: &Path) -> io::Result<Self> {
        let root = state_dir.join("workspaces");
        fs::create_dir_all(&root)?;
        Ok(Self { root: root.canonicalize()? })
    }
}

impl WorkspaceProvider for ScratchWorkspaces {
    fn derive(&self, task: &PrTask, _: &dyn Fn(LockEvent)) -> Result<Workspace, SourceError> {
        let path = self.root.join(task.task_id.to_string());
        fs::create_dir_all(&path)?;
        Ok(Workspace {
            task_id: task.task_id,
            repo_id: task.repo_id.clone(),
            path,
            head_commit: task.head_commit.clone(),
            derived_at: unix_millis(),
        })
    }

    fn release(&self, task_id: TaskId) {
        let _ = fs::remove_dir_all(self.root.join(task_id.to_string()));
    }
}

fn dir_key(repo_id: &str) -> String {
    repo_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' || c == '_' { c } else { '_' })
        .collect()
}

/// Runs git in `dir`, returning stdout or the combined diagnostics.
pub fn run_git(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = Command::new("git")
        .args(args)
        .current_dir(dir)
        .env("GIT_TERMINAL_PROMPT", "0")
        .stdin(Stdio::null())
        .output()
        .map_err(|e| format!("cannot run git: {e}"))?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("{} {}", String::from_utf8_lossy(&out.stderr).trim(), out.status))
    }
}

/// Recursive byte count of regular files, not following symlinks.
pub fn dir_size(path: &Path) -> u64 {
    let Ok(meta) = fs::symlink_metadata(path) else {
        return 0;
    };
    if meta.is_file() {
        return meta.len();
    }
    if !meta.is_dir() {
        return 0;
    }
    fs::read_dir(path).map(|rd| rd.filter_map(Result::ok).map(|e| dir_size(&e.path())).sum()).unwrap_or(0)
}
