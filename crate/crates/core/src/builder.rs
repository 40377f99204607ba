//! Per-task build roots and the stubbed platform build modules.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::config::StubBuildConfig;
use crate::model::{CheckResult, CheckStatus, PrTask, TaskId};
use crate::process::{run_supervised, RunOutcome, RunSpec, SupervisionHooks};

pub const BUILD_MANIFEST: &str = "build.json";
pub const SOURCE_LINK: &str = "src";
pub const OUTPUT_DIR: &str = "output";

#[derive(Debug, thiserror::Error)]
pub enum BuildError {
    #[error("build root for task {0} already exists")]
    RootCollision(TaskId),
    #[error("no space left to prepare build root {0}")]
    DiskFull(PathBuf),
    #[error("build root {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildManifest {
    /// Platforms planned for this root.
    pub platform: Vec<String>,
    pub task_id: TaskId,
    pub head_sha: String,
}

fn io_err(path: &Path, e: io::Error) -> BuildError {
    if e.raw_os_error() == Some(libc::ENOSPC) {
        BuildError::DiskFull(path.to_owned())
    } else {
        BuildError::Io { path: path.to_owned(), source: e }
    }
}

/// Everything a build module needs besides its descriptor.
pub struct BuildInvocation<'a> {
    pub root: &'a Path,
    pub workspace: &'a Path,
    pub env: Vec<(String, String)>,
    pub timeout: Duration,
    pub grace: Duration,
    pub log_path: PathBuf,
    pub hooks: &'a dyn SupervisionHooks,
}

pub struct Builder {
    roots_dir: PathBuf,
    stubs: BTreeMap<String, StubBuildConfig>,
}

impl Builder {
    pub fn new(roots_dir: &Path, stubs: BTreeMap<String, StubBuildConfig>) -> Self {
        Self { roots_dir: roots_dir.to_owned(), stubs }
    }

    pub fn root_path(&self, task_id: TaskId) -> PathBuf {
        self.roots_dir.join(task_id.to_string())
    }

    /// Creates `<roots>/<task_id>/` holding a `src` link to the workspace,
    /// an empty `output/` and `build.json`.
    pub fn prepare_build_root(
        &self,
        task: &PrTask,
        workspace: &Path,
        platforms: &[String],
    ) -> Result<PathBuf, BuildError> {
        fs::create_dir_all(&self.roots_dir).map_err(|e| io_err(&self.roots_dir, e))?;
        let root = self.root_path(task.task_id);
        match fs::create_dir(&root) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => return Err(BuildError::RootCollision(task.task_id)),
            Err(e) => return Err(io_err(&root, e)),
        }
        let populate = || -> Result<(), BuildError> {
            std::os::unix::fs::symlink(workspace, root.join(SOURCE_LINK)).map_err(|e| io_err(&root, e))?;
            fs::create_dir(root.join(OUTPUT_DIR)).map_err(|e| io_err(&root, e))?;
            let manifest = BuildManifest {
                platform: platforms.to_vec(),
                task_id: task.task_id,
                head_sha: task.head_commit.as_str().to_owned(),
            };
            let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            fs::write(root.join(BUILD_MANIFEST), text).map_err(|e| io_err(&root, e))
        };
        if let Err(e) = populate() {
            let _ = fs::remove_dir_all(&root);
            return Err(e);
        }
        Ok(root)
    }

    /// Removes the root; the linked workspace is left alone.
    pub fn release_build_root(&self, task_id: TaskId) {
        let root = self.root_path(task_id);
        if let Err(e) = fs::remove_dir_all(&root) {
            if e.kind() != io::ErrorKind::NotFound {
                log::warn!("cannot remove build root {}: {e}", root.display());
            }
        }
    }

    pub fn stub_config(&self, platform: &str) -> StubBuildConfig {
        self.stubs.get(platform).cloned().unwrap_or_default()
    }

    /// Runs the stub module for `platform`. The stub sleeps for its cost
    /// and, when the seeded draw succeeds, writes `output/pkg-<platform>.txt`.
    pub fn run_stub_module(&self, platform: &str, task: &PrTask, inv: &BuildInvocation<'_>) -> CheckResult {
        let cfg = self.stub_config(platform);
        let succeed = stub_draw(task.task_id, platform, cfg.success_probability);
        let artifact = inv.root.join(OUTPUT_DIR).join(format!("pkg-{platform}.txt"));
        let script = r#"sleep "$STUB_COST"
if [ "$STUB_OK" = 1 ]; then
    printf 'package for %s at %s\n' "$STUB_PLATFORM" "$CI_HEAD_SHA" > "$STUB_ARTIFACT"
    echo "built $STUB_PLATFORM"
else
    echo "build for $STUB_PLATFORM failed" >&2
    exit 1
fi"#;
        let mut env = inv.env.clone();
        env.extend([
            ("STUB_COST".to_owned(), format!("{:.3}", cfg.cost_seconds.max(0.0))),
            ("STUB_OK".to_owned(), if succeed { "1" } else { "0" }.to_owned()),
            ("STUB_PLATFORM".to_owned(), platform.to_owned()),
            ("STUB_ARTIFACT".to_owned(), artifact.to_string_lossy().into_owned()),
        ]);
        let spec = RunSpec {
            program: "/bin/sh".into(),
            args: vec!["-c".into(), script.into()],
            cwd: inv.workspace.to_owned(),
            env,
            timeout: inv.timeout,
            grace: inv.grace,
            log_path: inv.log_path.clone(),
        };
        let report = run_supervised(&spec, inv.hooks);
        let mut result = CheckResult::new(
            platform,
            outcome_status(&report.outcome),
            report.duration.as_millis() as u64,
            report.output,
        );
        if result.status == CheckStatus::Pass && artifact.exists() {
            result.artifact_paths.push(artifact);
        }
        result
    }
}

/// Deterministic per (task, platform) so reruns of a task agree.
fn stub_draw(task_id: TaskId, platform: &str, p: f64) -> bool {
    let seed = platform.bytes().fold(task_id.wrapping_mul(0x9E37_79B9_7F4A_7C15), |h, b| h.rotate_left(5) ^ b as u64);
    rand::rngs::StdRng::seed_from_u64(seed).gen::<f64>() < p
}

/// Exit 0 passes, another exit code fails, anything else did not complete.
/// Exit code a plugin uses to signal a broken environment contract.
pub const CONTRACT_ERROR_EXIT: i32 = 2;

pub fn outcome_status(outcome: &RunOutcome) -> CheckStatus {
    match outcome {
        RunOutcome::Exited(st) => match st.code() {
            Some(0) => CheckStatus::Pass,
            Some(CONTRACT_ERROR_EXIT) => CheckStatus::Crashed,
            Some(_) => CheckStatus::Fail,
            None => CheckStatus::Crashed,
        },
        RunOutcome::TimedOut => CheckStatus::TimedOut,
        RunOutcome::Cancelled | RunOutcome::SpawnFailed(_) => CheckStatus::Crashed,
    }
}
