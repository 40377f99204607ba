//! Helpers for building throwaway git repositories in tests and demos.

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::Command;

use crate::model::CommitId;

/// A local git repository usable as a clone URL.
pub struct FixtureRepo {
    pub path: PathBuf,
}

pub struct CommitSpec<'a> {
    pub message: &'a str,
    pub author_name: &'a str,
    pub author_email: &'a str,
    /// Unix seconds.
    pub author_time: i64,
}

impl Default for CommitSpec<'_> {
    fn default() -> Self {
        Self {
            message: "change\n\nSigned-off-by: Fixture Dev <dev@example.com>",
            author_name: "Fixture Dev",
            author_email: "dev@example.com",
            author_time: 1_600_000_000,
        }
    }
}

impl FixtureRepo {
    /// Initializes a repository with branch `main` and one commit.
    pub fn init(path: &Path) -> Self {
        fs::create_dir_all(path).unwrap();
        let repo = Self { path: path.to_owned() };
        repo.git(&["init", "--quiet", "-b", "main"]);
        repo.write("README.md", b"fixture\n");
        repo.commit_all(&CommitSpec {
            message: "initial\n\nSigned-off-by: Fixture Dev <dev@example.com>",
            ..Default::default()
        });
        repo
    }

    pub fn url(&self) -> String {
        format!("file://{}", self.path.display())
    }

    pub fn git(&self, args: &[&str]) -> String {
        let out = Command::new("git")
            .args(args)
            .current_dir(&self.path)
            .env("GIT_CONFIG_NOSYSTEM", "1")
            .env("GIT_COMMITTER_NAME", "Fixture Committer")
            .env("GIT_COMMITTER_EMAIL", "committer@example.com")
            .env("GIT_AUTHOR_NAME", "Fixture Dev")
            .env("GIT_AUTHOR_EMAIL", "dev@example.com")
            .output()
            .expect("git runs");
        assert!(out.status.success(), "git {args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8_lossy(&out.stdout).into_owned()
    }

    pub fn write(&self, rel: &str, content: &[u8]) {
        let p = self.path.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).unwrap();
        }
        fs::write(p, content).unwrap();
    }

    pub fn set_mode(&self, rel: &str, mode: u32) {
        fs::set_permissions(self.path.join(rel), fs::Permissions::from_mode(mode)).unwrap();
    }

    pub fn remove(&self, rel: &str) {
        fs::remove_file(self.path.join(rel)).unwrap();
    }

    pub fn checkout(&self, branch: &str, create: bool) {
        if create {
            self.git(&["checkout", "--quiet", "-b", branch]);
        } else {
            self.git(&["checkout", "--quiet", branch]);
        }
    }

    /// Stages everything and commits; returns the new commit id.
    pub fn commit_all(&self, spec: &CommitSpec<'_>) -> CommitId {
        self.git(&["add", "-A"]);
        let date = format!("@{} +0000", spec.author_time);
        let out = Command::new("git")
            .args(["commit", "--quiet", "--allow-empty", "--allow-empty-message", "-F", "-"])
            .current_dir(&self.path)
            .env("GIT_CONFIG_NOSYSTEM", "1")
            .env("GIT_AUTHOR_NAME", spec.author_name)
            .env("GIT_AUTHOR_EMAIL", spec.author_email)
            .env("GIT_AUTHOR_DATE", &date)
            .env("GIT_COMMITTER_NAME", "Fixture Committer")
            .env("GIT_COMMITTER_EMAIL", "committer@example.com")
            .env("GIT_COMMITTER_DATE", &date)
            .stdin(std::process::Stdio::piped())
            .spawn()
            .and_then(|mut child| {
                use std::io::Write;
                child.stdin.take().unwrap().write_all(spec.message.as_bytes())?;
                child.wait_with_output()
            })
            .expect("git commit runs");
        assert!(out.status.success(), "commit failed: {}", String::from_utf8_lossy(&out.stderr));
        self.head()
    }

    pub fn head(&self) -> CommitId {
        CommitId::parse(self.git(&["rev-parse", "HEAD"]).trim()).unwrap()
    }
}
