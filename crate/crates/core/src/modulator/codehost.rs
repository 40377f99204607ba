//! Outbound comment and commit-status calls to the code host.

use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use serde_json::json;

use crate::model::{CheckResult, CheckStatus};

/// Retries after the first attempt.
pub const MAX_RETRIES: u32 = 3;
pub const STATUS_CONTEXT_PREFIX: &str = "lightci/";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatusState {
    Pending,
    Success,
    Failure,
    Error,
}

impl StatusState {
    pub fn as_str(self) -> &'static str {
        match self {
            StatusState::Pending => "pending",
            StatusState::Success => "success",
            StatusState::Failure => "failure",
            StatusState::Error => "error",
        }
    }
}

/// Final commit status for a finished module, with a short description.
/// Advisory (non-blocking) failures are posted as success marked neutral.
pub fn status_for(result: &CheckResult) -> (StatusState, String) {
    let failed = result.status.is_failure();
    if failed && !result.blocking {
        return (StatusState::Success, format!("neutral: advisory {:?}", result.status));
    }
    match result.status {
        CheckStatus::Pass => (StatusState::Success, "passed".into()),
        CheckStatus::Skipped => (StatusState::Success, format!("skipped: {}", first_line(&result.report_text))),
        CheckStatus::Fail => (StatusState::Failure, "failed".into()),
        CheckStatus::TimedOut => (StatusState::Error, "timed out".into()),
        CheckStatus::Crashed => (StatusState::Error, "crashed".into()),
    }
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or("")
}

#[derive(Debug, thiserror::Error)]
pub enum CodeHostError {
    #[error("comment failed after {attempts} attempts: {last}")]
    CommentFailed { attempts: u32, last: String },
    #[error("status report failed after {attempts} attempts: {last}")]
    ReportFailed { attempts: u32, last: String },
}

pub trait CodeHost: Send + Sync {
    fn comment(&self, repo_id: &str, pr_number: u64, body: &str) -> Result<(), CodeHostError>;

    fn report(
        &self,
        repo_id: &str,
        head_commit: &str,
        plugin_name: &str,
        state: StatusState,
        description: &str,
        detail_url: Option<&str>,
    ) -> Result<(), CodeHostError>;
}

/// Used when no code host is configured.
pub struct NoopCodeHost;

impl CodeHost for NoopCodeHost {
    fn comment(&self, _: &str, _: u64, _: &str) -> Result<(), CodeHostError> {
        Ok(())
    }
    fn report(&self, _: &str, _: &str, _: &str, _: StatusState, _: &str, _: Option<&str>) -> Result<(), CodeHostError> {
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum CodeHostCall {
    Comment { repo_id: String, pr_number: u64, body: String },
    Report { repo_id: String, head_commit: String, plugin_name: String, state: StatusState, description: String },
}

/// Keeps every call in memory; optionally fails them all.
#[derive(Default)]
pub struct RecordingCodeHost {
    pub calls: Mutex<Vec<CodeHostCall>>,
    pub fail: bool,
}

impl RecordingCodeHost {
    pub fn failing() -> Self {
        Self { calls: Mutex::default(), fail: true }
    }

    pub fn calls(&self) -> Vec<CodeHostCall> {
        self.calls.lock().unwrap().clone()
    }
}

impl CodeHost for RecordingCodeHost {
    fn comment(&self, repo_id: &str, pr_number: u64, body: &str) -> Result<(), CodeHostError> {
        self.calls.lock().unwrap().push(CodeHostCall::Comment {
            repo_id: repo_id.into(),
            pr_number,
            body: body.into(),
        });
        if self.fail {
            return Err(CodeHostError::CommentFailed { attempts: 1, last: "injected".into() });
        }
        Ok(())
    }

    fn report(
        &self,
        repo_id: &str,
        head_commit: &str,
        plugin_name: &str,
        state: StatusState,
        description: &str,
        _detail_url: Option<&str>,
    ) -> Result<(), CodeHostError> {
        self.calls.lock().unwrap().push(CodeHostCall::Report {
            repo_id: repo_id.into(),
            head_commit: head_commit.into(),
            plugin_name: plugin_name.into(),
            state,
            description: description.into(),
        });
        if self.fail {
            return Err(CodeHostError::ReportFailed { attempts: 1, last: "injected".into() });
        }
        Ok(())
    }
}

/// GitHub-compatible REST client. Server errors and transport failures are
/// retried with exponential backoff; client errors are not.
pub struct HttpCodeHost {
    base_url: String,
    token: Option<String>,
    agent: ureq::Agent,
    backoff: Duration,
}

enum Attempt {
    Done,
    Retry(String),
    GiveUp(String),
}

impl HttpCodeHost {
    pub fn new(base_url: &str, token: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(10)))
            .build()
            .into();
        Self { base_url: base_url.trim_end_matches('/').to_owned(), token, agent, backoff: Duration::from_millis(250) }
    }

    /// Delay before the first retry; doubles on each further retry.
    pub fn with_backoff(mut self, backoff: Duration) -> Self {
        self.backoff = backoff;
        self
    }

    fn post_once(&self, path: &str, body: &serde_json::Value) -> Attempt {
        let mut req = self
            .agent
            .post(format!("{}{path}", self.base_url))
            .header("Content-Type", "application/json")
            .header("Accept", "application/vnd.github+json");
        if let Some(t) = &self.token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        match req.send(body.to_string()) {
            Ok(resp) => {
                let code = resp.status().as_u16();
                match code {
                    200..=299 => Attempt::Done,
                    500..=599 => Attempt::Retry(format!("HTTP {code}")),
                    _ => Attempt::GiveUp(format!("HTTP {code}")),
                }
            }
            Err(e) => Attempt::Retry(e.to_string()),
        }
    }

    /// Returns the number of attempts made, or the last error.
    fn post(&self, path: &str, body: &serde_json::Value) -> Result<u32, (u32, String)> {
        let mut delay = self.backoff;
        for attempt in 1..=MAX_RETRIES + 1 {
            match self.post_once(path, body) {
                Attempt::Done => return Ok(attempt),
                Attempt::GiveUp(e) => return Err((attempt, e)),
                Attempt::Retry(e) if attempt > MAX_RETRIES => return Err((attempt, e)),
                Attempt::Retry(e) => {
                    log::debug!("code host POST {path} attempt {attempt} failed: {e}");
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
        unreachable!("loop returns on the final attempt")
    }
}

impl CodeHost for HttpCodeHost {
    fn comment(&self, repo_id: &str, pr_number: u64, body: &str) -> Result<(), CodeHostError> {
        self.post(&format!("/repos/{repo_id}/issues/{pr_number}/comments"), &json!({ "body": body }))
            .map(|_| ())
            .map_err(|(attempts, last)| CodeHostError::CommentFailed { attempts, last })
    }

    fn report(
        &self,
        repo_id: &str,
        head_commit: &str,
        plugin_name: &str,
        state: StatusState,
        description: &str,
        detail_url: Option<&str>,
    ) -> Result<(), CodeHostError> {
        let mut body = json!({
            "state": state.as_str(),
            "context": format!("{STATUS_CONTEXT_PREFIX}{plugin_name}"),
            "description": description,
        });
        if let Some(url) = detail_url {
            body["target_url"] = json!(url);
        }
        self.post(&format!("/repos/{repo_id}/statuses/{head_commit}"), &body)
            .map(|_| ())
            .map_err(|(attempts, last)| CodeHostError::ReportFailed { attempts, last })
    }
}
