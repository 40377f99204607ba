//! Process-group supervision for plugin executions.
//!
//! Every plugin runs as the leader of its own process group so that the whole
//! tree it spawns can be signalled at once. Liveness is judged from the
//! process table; exited-but-unreaped (zombie) entries count as gone.

use std::fs;
use std::io;
use std::os::unix::process::CommandExt;
use std::process::{Child, Command, ExitStatus, Stdio};
use std::thread;
use std::time::{Duration, Instant};

pub type Pid = i32;

const POLL: Duration = Duration::from_millis(10);

/// Spawns `cmd` as a new process-group leader with stdin closed.
pub fn spawn_in_group(cmd: &mut Command) -> io::Result<Child> {
    cmd.stdin(Stdio::null()).process_group(0).spawn()
}

pub fn signal_group(pgid: Pid, signal: i32) -> bool {
    if pgid <= 1 {
        return false;
    }
    // SAFETY: killpg has no memory-safety preconditions.
    unsafe { libc::killpg(pgid, signal) == 0 }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProcStat {
    pub pid: Pid,
    pub state: char,
    pub ppid: Pid,
    pub pgrp: Pid,
}

pub fn read_stat(pid: Pid) -> Option<ProcStat> {
    let text = fs::read_to_string(format!("/proc/{pid}/stat")).ok()?;
    // comm may contain spaces and parentheses; fields resume after the last ')'
    let rest = &text[text.rfind(')')? + 2..];
    let mut it = rest.split_whitespace();
    let state = it.next()?.chars().next()?;
    let ppid = it.next()?.parse().ok()?;
    let pgrp = it.next()?.parse().ok()?;
    Some(ProcStat { pid, state, ppid, pgrp })
}

fn proc_available() -> bool {
    fs::metadata("/proc/self/stat").is_ok()
}

/// Snapshot of every readable process in the table.
pub fn process_table() -> Vec<ProcStat> {
    let Ok(entries) = fs::read_dir("/proc") else {
        return Vec::new();
    };
    entries.filter_map(|e| e.ok()?.file_name().to_str()?.parse::<Pid>().ok()).filter_map(read_stat).collect()
}

/// True if `pid` exists and has not exited.
pub fn process_alive(pid: Pid) -> bool {
    if proc_available() {
        return matches!(read_stat(pid), Some(s) if s.state != 'Z' && s.state != 'X');
    }
    // SAFETY: signal 0 only performs the existence check.
    unsafe { libc::kill(pid, 0) == 0 }
}

/// True if any non-exited process belongs to process group `pgid`.
pub fn group_alive(pgid: Pid) -> bool {
    if proc_available() {
        return process_table().iter().any(|p| p.pgrp == pgid && p.state != 'Z' && p.state != 'X');
    }
    // SAFETY: signal 0 only performs the existence check.
    unsafe { libc::killpg(pgid, 0) == 0 }
}

/// Sums resident memory over the members of `pgid`.
pub fn group_rss_bytes(pgid: Pid) -> u64 {
    process_table().iter().filter(|p| p.pgrp == pgid).filter_map(|p| rss_bytes(p.pid)).sum()
}

pub fn rss_bytes(pid: Pid) -> Option<u64> {
    let status = fs::read_to_string(format!("/proc/{pid}/status")).ok()?;
    let line = status.lines().find(|l| l.starts_with("VmRSS:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    AlreadyGone,
    Terminated,
    ForceKilled,
}

/// Polite terminate, wait up to `grace`, then force-kill the group.
pub fn terminate_group(pgid: Pid, grace: Duration) -> Termination {
    if !group_alive(pgid) {
        return Termination::AlreadyGone;
    }
    signal_group(pgid, libc::SIGTERM);
    // Stopped members cannot act on SIGTERM until continued.
    signal_group(pgid, libc::SIGCONT);
    if wait_until(grace, || !group_alive(pgid)) {
        return Termination::Terminated;
    }
    signal_group(pgid, libc::SIGKILL);
    wait_until(Duration::from_secs(1), || !group_alive(pgid));
    Termination::ForceKilled
}

/// Polls `done` until it returns true or `limit` elapses.
pub fn wait_until(limit: Duration, mut done: impl FnMut() -> bool) -> bool {
    let deadline = Instant::now() + limit;
    loop {
        if done() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(POLL);
    }
}

#[derive(Debug)]
pub enum WaitOutcome {
    Exited(ExitStatus),
    TimedOut,
    Cancelled,
}

/// Waits for `child` until it exits, `timeout` elapses, or `cancelled`
/// reports true. The child is not signalled here.
pub fn wait_with_deadline(
    child: &mut Child,
    timeout: Duration,
    cancelled: &dyn Fn() -> bool,
) -> io::Result<WaitOutcome> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(WaitOutcome::Exited(status));
        }
        if cancelled() {
            return Ok(WaitOutcome::Cancelled);
        }
        if Instant::now() >= deadline {
            return Ok(WaitOutcome::TimedOut);
        }
        thread::sleep(POLL);
    }
}

/// Observes and controls one supervised execution.
pub trait SupervisionHooks: Sync {
    fn spawned(&self, _pgid: Pid) {}
    fn finished(&self, _pgid: Pid) {}
    fn cancelled(&self) -> bool {
        false
    }
}

pub struct NoHooks;
impl SupervisionHooks for NoHooks {}

/// A command to run under supervision. Output (stdout and stderr) goes to
/// `log_path`.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub program: std::path::PathBuf,
    pub args: Vec<String>,
    pub cwd: std::path::PathBuf,
    pub env: Vec<(String, String)>,
    pub timeout: Duration,
    pub grace: Duration,
    pub log_path: std::path::PathBuf,
}

#[derive(Debug)]
pub enum RunOutcome {
    Exited(ExitStatus),
    TimedOut,
    Cancelled,
    SpawnFailed(io::Error),
}

#[derive(Debug)]
pub struct RunReport {
    pub outcome: RunOutcome,
    pub duration: Duration,
    pub output: String,
}

/// Runs `spec` in its own process group, enforcing the timeout. On timeout
/// or cancellation the whole group is terminated (polite signal, grace,
/// force-kill) before returning.
pub fn run_supervised(spec: &RunSpec, hooks: &dyn SupervisionHooks) -> RunReport {
    let start = Instant::now();
    let log = match fs::File::create(&spec.log_path) {
        Ok(f) => f,
        Err(e) => {
            return RunReport { outcome: RunOutcome::SpawnFailed(e), duration: start.elapsed(), output: String::new() }
        }
    };
    let log_err = match log.try_clone() {
        Ok(f) => f,
        Err(e) => {
            return RunReport { outcome: RunOutcome::SpawnFailed(e), duration: start.elapsed(), output: String::new() }
        }
    };
    let mut cmd = Command::new(&spec.program);
    cmd.args(&spec.args).current_dir(&spec.cwd).stdout(log).stderr(log_err);
    for (k, v) in &spec.env {
        cmd.env(k, v);
    }
    let mut child = match spawn_in_group(&mut cmd) {
        Ok(c) => c,
        Err(e) => {
            let output = format!("failed to spawn {}: {e}", spec.program.display());
            return RunReport { outcome: RunOutcome::SpawnFailed(e), duration: start.elapsed(), output };
        }
    };
    let pgid = child.id() as Pid;
    hooks.spawned(pgid);
    let waited = wait_with_deadline(&mut child, spec.timeout, &|| hooks.cancelled());
    let outcome = match waited {
        Ok(WaitOutcome::Exited(status)) => {
            // the leader is gone; stray members of its group are not allowed to outlive it
            if group_alive(pgid) {
                terminate_group(pgid, spec.grace);
            }
            RunOutcome::Exited(status)
        }
        Ok(WaitOutcome::TimedOut) => {
            terminate_group(pgid, spec.grace);
            let _ = child.wait();
            RunOutcome::TimedOut
        }
        Ok(WaitOutcome::Cancelled) => {
            terminate_group(pgid, spec.grace);
            let _ = child.wait();
            RunOutcome::Cancelled
        }
        Err(e) => {
            terminate_group(pgid, spec.grace);
            let _ = child.wait();
            RunOutcome::SpawnFailed(e)
        }
    };
    hooks.finished(pgid);
    let duration = start.elapsed();
    RunReport { outcome, duration, output: read_log(&spec.log_path) }
}

fn read_log(path: &std::path::Path) -> String {
    use std::io::Read;
    let mut buf = Vec::new();
    if let Ok(f) = fs::File::open(path) {
        let _ = f.take(crate::model::REPORT_LIMIT_BYTES as u64 + 1).read_to_end(&mut buf);
    }
    crate::model::truncate_report(String::from_utf8_lossy(&buf).into_owned())
}
