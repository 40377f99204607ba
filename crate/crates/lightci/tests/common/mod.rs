#![allow(dead_code)]

use std::fs;
use std::io::{BufRead, BufReader};
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use lightci_core::model::CommitId;
use lightci_core::modulator::builtin_table;
use lightci_core::process::{process_alive, Pid};
use lightci_core::scheduler::StatusSnapshot;
use lightci_core::testing::FixtureRepo;
use lightci_core::webhook::{pull_request_payload, sign};
use serde_json::{json, Value};

pub const SECRET: &str = "hook-secret";
pub const ADMIN: &str = "admin-token";
pub const REPO: &str = "acme/widget";

/// A recorded request: method, path, body.
pub type Seen = (String, String, String);

/// HTTP server answering every request with `code`.
pub struct MockHost {
    pub url: String,
    seen: Arc<Mutex<Vec<Seen>>>,
    server: Arc<tiny_http::Server>,
    handle: Option<thread::JoinHandle<()>>,
}

impl MockHost {
    pub fn start(code: u16) -> Self {
        let server = Arc::new(tiny_http::Server::http("127.0.0.1:0").unwrap());
        let url = format!("http://{}", server.server_addr().to_ip().unwrap());
        let seen = Arc::new(Mutex::new(Vec::new()));
        let handle = {
            let (server, seen) = (server.clone(), seen.clone());
            thread::spawn(move || {
                for mut req in server.incoming_requests() {
                    let mut body = String::new();
                    let _ = req.as_reader().read_to_string(&mut body);
                    seen.lock().unwrap().push((req.method().to_string(), req.url().to_owned(), body));
                    let _ = req.respond(tiny_http::Response::from_string("{}").with_status_code(code));
                }
            })
        };
        Self { url, seen, server, handle: Some(handle) }
    }

    pub fn requests(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for MockHost {
    fn drop(&mut self) {
        self.server.unblock();
        if let Some(h) = self.handle.take() {
            let _ = h.join();
        }
    }
}

/// Temp dir holding a fixture origin repository and a plugins directory.
pub struct Setup {
    pub dir: tempfile::TempDir,
    pub repo: FixtureRepo,
    pub head: CommitId,
}

impl Setup {
    /// One external pre-build stub plugin sleeping `sleep_s`; all built-in
    /// modules disabled. The stub logs its pid to `pids.log`.
    pub fn stub_pipeline(sleep_s: f64, timeout_s: u64) -> Self {
        Self::with_script(
            &format!("echo $$ >> \"$PID_LOG\"\nsleep {sleep_s} &\nwait\necho done > \"$CI_REPORT_DIR/stub.txt\""),
            timeout_s,
        )
    }

    /// Like `stub_pipeline` with a custom script body; `$PID_LOG` expands to
    /// the pid log path.
    pub fn with_script(body: &str, timeout_s: u64) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let repo = FixtureRepo::init(&dir.path().join("origin"));
        let head = repo.head();
        let plugin = dir.path().join("plugins/base/stub");
        fs::create_dir_all(&plugin).unwrap();
        let body = body.replace("$PID_LOG", &dir.path().join("pids.log").to_string_lossy());
        fs::write(plugin.join("run.sh"), format!("#!/bin/sh\n{body}\n")).unwrap();
        fs::set_permissions(plugin.join("run.sh"), fs::Permissions::from_mode(0o755)).unwrap();
        fs::write(
            plugin.join("plugin.json"),
            json!({ "name": "stub", "group": "pre", "exec": "run.sh", "timeout_seconds": timeout_s }).to_string(),
        )
        .unwrap();
        Self { dir, repo, head }
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    /// Config with every built-in module disabled, listening on an ephemeral port.
    pub fn config(&self) -> Value {
        let toggles: serde_json::Map<String, Value> =
            builtin_table().into_iter().map(|(_, n, _)| (n.to_owned(), Value::Bool(false))).collect();
        json!({
            "repositories": [{ "repo_id": REPO, "clone_url": self.repo.url(), "default_branch": "main" }],
            "max_run_queue": 4,
            "webhook_secret": SECRET,
            "admin_token": ADMIN,
            "listen_address": "127.0.0.1:0",
            "state_dir": self.path("state"),
            "plugins_dir": self.path("plugins"),
            "module_toggles": toggles,
            "kill_grace_seconds": 2,
            "shutdown_grace_seconds": 5,
        })
    }

    pub fn pids(&self) -> Vec<Pid> {
        fs::read_to_string(self.path("pids.log"))
            .unwrap_or_default()
            .split_whitespace()
            .filter_map(|p| p.parse().ok())
            .collect()
    }
}

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_lightci")
}

pub struct Daemon {
    pub child: Child,
    pub addr: String,
    pub stderr: Arc<Mutex<String>>,
}

impl Daemon {
    pub fn start(config: &Value, config_path: &Path) -> Self {
        fs::write(config_path, serde_json::to_string_pretty(config).unwrap()).unwrap();
        let mut child = Command::new(bin())
            .args(["serve", "--config"])
            .arg(config_path)
            .env("RUST_LOG", "warn")
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        let stderr = Arc::new(Mutex::new(String::new()));
        {
            let err = child.stderr.take().unwrap();
            let sink = stderr.clone();
            thread::spawn(move || {
                for line in BufReader::new(err).lines().map_while(Result::ok) {
                    sink.lock().unwrap().push_str(&line);
                    sink.lock().unwrap().push('\n');
                }
            });
        }
        let (tx, rx) = mpsc::channel();
        let out = child.stdout.take().unwrap();
        thread::spawn(move || {
            for line in BufReader::new(out).lines().map_while(Result::ok) {
                if let Some(addr) = line.strip_prefix("listening on ") {
                    let _ = tx.send(addr.to_owned());
                }
            }
        });
        let addr = rx.recv_timeout(Duration::from_secs(30)).unwrap_or_else(|_| {
            panic!("daemon did not start: {}", stderr.lock().unwrap());
        });
        Self { child, addr, stderr }
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn status(&self) -> StatusSnapshot {
        let mut resp = agent().get(&self.url("/status")).call().unwrap();
        serde_json::from_str(&resp.body_mut().read_to_string().unwrap()).unwrap()
    }

    pub fn wait_for(&self, timeout: Duration, pred: impl Fn(&StatusSnapshot) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        while Instant::now() < deadline {
            if pred(&self.status()) {
                return true;
            }
            thread::sleep(Duration::from_millis(50));
        }
        false
    }

    pub fn pid(&self) -> Pid {
        self.child.id() as Pid
    }

    pub fn terminate(&mut self) -> std::process::ExitStatus {
        unsafe { libc::kill(self.pid(), libc::SIGTERM) };
        self.child.wait().unwrap()
    }
}

impl Drop for Daemon {
    fn drop(&mut self) {
        if let Ok(None) = self.child.try_wait() {
            let _ = self.child.kill();
            let _ = self.child.wait();
        }
    }
}

pub fn agent() -> ureq::Agent {
    ureq::Agent::config_builder()
        .http_status_as_error(false)
        .timeout_global(Some(Duration::from_secs(10)))
        .build()
        .into()
}

pub struct Reply {
    pub status: u16,
    pub body: Value,
    pub retry_after: Option<String>,
}

pub fn sha(n: u64) -> String {
    format!("{n:040x}")
}

/// Posts a signed pull_request delivery.
pub fn post_webhook(d: &Daemon, pr: u64, action: &str, head: &str, delivery_id: &str) -> Reply {
    post_webhook_with(d, pr, action, head, delivery_id, SECRET)
}

pub fn post_webhook_with(d: &Daemon, pr: u64, action: &str, head: &str, delivery_id: &str, secret: &str) -> Reply {
    let payload = pull_request_payload(REPO, "ignored://", pr, action, head, &format!("pr-{pr}"), "main");
    let body = serde_json::to_vec(&payload).unwrap();
    let resp = agent()
        .post(&d.url("/webhook"))
        .header("Content-Type", "application/json")
        .header("X-Event-Kind", "pull_request")
        .header("X-Delivery-Id", delivery_id)
        .header("X-Signature-256", sign(secret.as_bytes(), &body))
        .send(&body[..])
        .unwrap();
    reply(resp)
}

pub fn reply(mut resp: ureq::http::Response<ureq::Body>) -> Reply {
    let status = resp.status().as_u16();
    let retry_after = resp.headers().get("retry-after").map(|v| v.to_str().unwrap().to_owned());
    let text = resp.body_mut().read_to_string().unwrap_or_default();
    Reply { status, body: serde_json::from_str(&text).unwrap_or(Value::Null), retry_after }
}

pub fn all_gone(pids: &[Pid], within: Duration) -> bool {
    let deadline = Instant::now() + within;
    loop {
        if pids.iter().all(|p| !process_alive(*p)) {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(50));
    }
}

/// Every process whose parent chain reaches `root`.
pub fn descendants(root: Pid) -> Vec<Pid> {
    let mut parent = std::collections::HashMap::new();
    for entry in fs::read_dir("/proc").unwrap().flatten() {
        let Ok(pid) = entry.file_name().to_string_lossy().parse::<Pid>() else { continue };
        let Ok(stat) = fs::read_to_string(entry.path().join("stat")) else { continue };
        // the command name may contain spaces; fields resume after the last ')'
        let Some(rest) = stat.rsplit_once(')').map(|(_, r)| r) else { continue };
        let fields: Vec<&str> = rest.split_whitespace().collect();
        if fields.first() == Some(&"Z") {
            continue;
        }
        if let Some(ppid) = fields.get(1).and_then(|p| p.parse::<Pid>().ok()) {
            parent.insert(pid, ppid);
        }
    }
    parent
        .keys()
        .copied()
        .filter(|&p| {
            let mut cur = p;
            for _ in 0..64 {
                match parent.get(&cur) {
                    Some(&pp) if pp == root => return true,
                    Some(&pp) if pp > 1 => cur = pp,
                    _ => return false,
                }
            }
            false
        })
        .collect()
}

/// VmRSS of a process in bytes.
pub fn rss_bytes(pid: Pid) -> u64 {
    let status = fs::read_to_string(format!("/proc/{pid}/status")).unwrap();
    let line = status.lines().find(|l| l.starts_with("VmRSS:")).unwrap();
    line.split_whitespace().nth(1).unwrap().parse::<u64>().unwrap() * 1024
}
