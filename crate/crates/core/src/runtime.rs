//! The running service: a single owner thread drives the scheduler; one
//! worker thread per admitted task derives the workspace and runs the
//! pipeline. Workers talk to the owner only through commands.

use std::collections::HashMap;
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, RecvTimeoutError, Sender};

use crate::builder::Builder;
use crate::checks::effective_tool_specs;
use crate::clock::{Clock, SystemClock};
use crate::config::ServiceConfig;
use crate::inspector::{Inspector, PipelineOptions};
use crate::journal::Journal;
use crate::model::{PipelineResult, PrAction, PrEvent, TaskId, TaskState};
use crate::modulator::{load_store, AgingTracker, CodeHost, StoreError};
use crate::process::{group_rss_bytes, terminate_group, Pid, SupervisionHooks};
use crate::scheduler::{KillReason, Scheduler, SchedulerConfig, SchedulerError, StatusSnapshot, TaskReaper};
use crate::source::{LockEvent, SourceManager, WorkspaceProvider};

pub const JOURNAL_FILE: &str = "journal.ndjson";
pub const AGING_FILE: &str = "aging.json";
const TICK: Duration = Duration::from_secs(1);

#[derive(Debug, thiserror::Error)]
pub enum EngineError {
    #[error("state directory {path}: {source}")]
    StateDir { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("aging records: {0}")]
    Aging(String),
    #[error(transparent)]
    Scheduler(#[from] SchedulerError),
    #[error("engine has stopped")]
    Stopped,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SubmitOutcome {
    Queued { task_id: TaskId, superseded: Vec<TaskId> },
    Cancelled(Vec<TaskId>),
}

type Reply<T> = Sender<T>;

enum Command {
    Submit(PrEvent, Reply<Result<SubmitOutcome, SchedulerError>>),
    Cancel(String, u64, Reply<Vec<TaskId>>),
    Reclaim(Reply<Option<TaskId>>),
    Spawned(TaskId, Pid),
    Exited(TaskId, Pid),
    Lock(TaskId, LockEvent),
    Workspace(TaskId, PathBuf),
    Finished(TaskId, Result<PipelineResult, String>),
    WorkerDone(TaskId),
    Shutdown(Reply<()>),
}

/// Cancellation flags shared between reaper and workers.
type Flags = Arc<Mutex<HashMap<TaskId, Arc<AtomicBool>>>>;

struct ProcessReaper {
    flags: Flags,
    grace: Duration,
    pending: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl TaskReaper for ProcessReaper {
    fn reap(&mut self, task_id: TaskId, groups: Vec<Pid>, reason: KillReason) {
        if let Some(flag) = self.flags.lock().unwrap().get(&task_id) {
            flag.store(true, Ordering::SeqCst);
        }
        if groups.is_empty() {
            return;
        }
        log::info!("task {task_id}: terminating {} process group(s) ({})", groups.len(), reason.as_str());
        let grace = self.grace;
        let handle = thread::spawn(move || {
            for g in groups {
                terminate_group(g, grace);
            }
        });
        let mut pending = self.pending.lock().unwrap();
        pending.retain(|h| !h.is_finished());
        pending.push(handle);
    }
}

/// Everything the engine needs, for callers that assemble their own parts.
pub struct EngineParts {
    pub scheduler: SchedulerConfig,
    pub provider: Arc<dyn WorkspaceProvider>,
    pub inspector: Arc<Inspector>,
    pub journal_path: Option<PathBuf>,
    pub kill_grace: Duration,
    pub memory_budget_bytes: Option<u64>,
}

pub struct Engine {
    tx: Sender<Command>,
    snapshot: Arc<RwLock<StatusSnapshot>>,
    owner: Mutex<Option<JoinHandle<()>>>,
    reaper_threads: Arc<Mutex<Vec<JoinHandle<()>>>>,
    workers: Arc<Mutex<HashMap<TaskId, JoinHandle<()>>>>,
}

impl Engine {
    /// Builds the full service from a validated configuration.
    pub fn start(config: &ServiceConfig, code_host: Arc<dyn CodeHost>) -> Result<Self, EngineError> {
        let state_dir = config.state_dir.clone();
        fs::create_dir_all(&state_dir).map_err(|source| EngineError::StateDir { path: state_dir.clone(), source })?;
        let store = Arc::new(load_store(&config.plugins_dir, config)?);
        let aging = AgingTracker::open(Some(&state_dir.join(AGING_FILE)), config.aging_window, &store)
            .map_err(|e| EngineError::Aging(e.to_string()))?;
        let provider =
            SourceManager::new(&state_dir, &config.repositories, Duration::from_secs(config.lock_timeout_seconds))
                .map_err(|e| EngineError::StateDir {
                    path: state_dir.clone(),
                    source: std::io::Error::other(e.to_string()),
                })?;
        let inspector = Inspector {
            store,
            thresholds: config.thresholds.clone(),
            tools: effective_tool_specs(&config.tools),
            builder: Arc::new(Builder::new(&state_dir.join("buildroots"), config.build_stubs.clone())),
            code_host,
            aging: Some(Arc::new(aging)),
            reports_dir: state_dir.join("reports"),
            kill_grace: Duration::from_secs(config.kill_grace_seconds),
            options: PipelineOptions { gate_postbuild: true, post_parallelism: config.max_run_queue },
        };
        let scheduler =
            SchedulerConfig { wait_capacity: config.wait_queue_capacity, ..SchedulerConfig::new(config.max_run_queue) };
        Self::start_with(EngineParts {
            scheduler,
            provider: Arc::new(provider),
            inspector: Arc::new(inspector),
            journal_path: Some(state_dir.join(JOURNAL_FILE)),
            kill_grace: Duration::from_secs(config.kill_grace_seconds),
            memory_budget_bytes: config.memory_budget_bytes,
        })
    }

    pub fn start_with(parts: EngineParts) -> Result<Self, EngineError> {
        let flags: Flags = Arc::default();
        let reaper_threads: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
        let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
        let mut sched = Scheduler::new(parts.scheduler, clock).with_reaper(Box::new(ProcessReaper {
            flags: flags.clone(),
            grace: parts.kill_grace,
            pending: reaper_threads.clone(),
        }));
        if let Some(path) = &parts.journal_path {
            let journal = Journal::open(path).map_err(|source| EngineError::StateDir { path: path.clone(), source })?;
            sched.add_observer(Box::new(journal));
        }
        let (tx, rx) = unbounded();
        let snapshot = Arc::new(RwLock::new(sched.snapshot()));
        let workers: Arc<Mutex<HashMap<TaskId, JoinHandle<()>>>> = Arc::default();
        let owner = Owner {
            sched,
            rx,
            tx: tx.clone(),
            flags,
            snapshot: snapshot.clone(),
            provider: parts.provider,
            inspector: parts.inspector,
            workers: workers.clone(),
            memory_budget: parts.memory_budget_bytes,
            kill_grace: parts.kill_grace,
        };
        let handle = thread::Builder::new()
            .name("scheduler".into())
            .spawn(move || owner.run())
            .map_err(|source| EngineError::StateDir { path: PathBuf::new(), source })?;
        Ok(Self { tx, snapshot, owner: Mutex::new(Some(handle)), reaper_threads, workers })
    }

    fn call<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, EngineError> {
        let (reply, rx) = bounded(1);
        self.tx.send(make(reply)).map_err(|_| EngineError::Stopped)?;
        rx.recv().map_err(|_| EngineError::Stopped)
    }

    /// Opened and Synchronized events enqueue a task; Closed cancels the PR.
    pub fn submit(&self, event: PrEvent) -> Result<SubmitOutcome, EngineError> {
        Ok(self.call(|r| Command::Submit(event, r))??)
    }

    pub fn cancel(&self, repo_id: &str, pr_number: u64) -> Result<Vec<TaskId>, EngineError> {
        self.call(|r| Command::Cancel(repo_id.to_owned(), pr_number, r))
    }

    pub fn reclaim(&self) -> Result<Option<TaskId>, EngineError> {
        self.call(Command::Reclaim)
    }

    /// Latest published state; never waits on the scheduler.
    pub fn snapshot(&self) -> StatusSnapshot {
        self.snapshot.read().unwrap().clone()
    }

    /// Polls the snapshot until `pred` holds or `timeout` passes.
    pub fn wait_for(&self, timeout: Duration, pred: impl Fn(&StatusSnapshot) -> bool) -> bool {
        let deadline = Instant::now() + timeout;
        loop {
            if pred(&self.snapshot()) {
                return true;
            }
            if Instant::now() >= deadline {
                return false;
            }
            thread::sleep(Duration::from_millis(20));
        }
    }

    pub fn is_idle(&self) -> bool {
        let s = self.snapshot();
        s.counters.live == 0
    }

    /// Kills every live task through the Hanging path, then waits up to
    /// `grace` for workers and process terminations to finish.
    pub fn shutdown(&self, grace: Duration) {
        let deadline = Instant::now() + grace;
        if self.call(Command::Shutdown).is_err() {
            return;
        }
        if let Some(h) = self.owner.lock().unwrap().take() {
            let _ = h.join();
        }
        let wait_all = |handles: Vec<JoinHandle<()>>| {
            for h in handles {
                while !h.is_finished() && Instant::now() < deadline {
                    thread::sleep(Duration::from_millis(10));
                }
                if h.is_finished() {
                    let _ = h.join();
                }
            }
        };
        wait_all(self.reaper_threads.lock().unwrap().drain(..).collect());
        wait_all(self.workers.lock().unwrap().drain().map(|(_, h)| h).collect());
    }
}

impl Drop for Engine {
    fn drop(&mut self) {
        if self.owner.lock().map(|o| o.is_some()).unwrap_or(false) {
            self.shutdown(Duration::from_secs(10));
        }
    }
}

struct Owner {
    sched: Scheduler,
    rx: Receiver<Command>,
    tx: Sender<Command>,
    flags: Flags,
    snapshot: Arc<RwLock<StatusSnapshot>>,
    provider: Arc<dyn WorkspaceProvider>,
    inspector: Arc<Inspector>,
    workers: Arc<Mutex<HashMap<TaskId, JoinHandle<()>>>>,
    memory_budget: Option<u64>,
    kill_grace: Duration,
}

impl Owner {
    fn run(mut self) {
        let mut last_tick = Instant::now();
        loop {
            match self.rx.recv_timeout(TICK) {
                Ok(Command::Shutdown(reply)) => {
                    let killed = self.sched.shutdown();
                    log::info!("shutdown: killed {} live task(s)", killed.len());
                    self.publish();
                    let _ = reply.send(());
                    return;
                }
                Ok(cmd) => self.handle(cmd),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return,
            }
            if last_tick.elapsed() >= TICK {
                self.housekeeping();
                last_tick = Instant::now();
            }
            self.start_workers();
            self.publish();
        }
    }

    fn handle(&mut self, cmd: Command) {
        match cmd {
            Command::Submit(event, reply) => {
                let outcome = match event.action {
                    PrAction::Closed => {
                        Ok(SubmitOutcome::Cancelled(self.sched.cancel(&event.repo_id, event.pr_number)))
                    }
                    PrAction::Opened | PrAction::Synchronized => {
                        let task = self.sched.create_task(&event);
                        let task_id = task.task_id;
                        self.sched.submit(task).map(|superseded| SubmitOutcome::Queued { task_id, superseded })
                    }
                };
                self.sched.admit_all();
                let _ = reply.send(outcome);
            }
            Command::Cancel(repo, pr, reply) => {
                let _ = reply.send(self.sched.cancel(&repo, pr));
            }
            Command::Reclaim(reply) => {
                let _ = reply.send(self.sched.reclaim_oldest());
                self.sched.admit_all();
            }
            Command::Spawned(task_id, pgid) => {
                if !self.sched.register_process(task_id, pgid) {
                    // the task died while this process was starting
                    let grace = self.kill_grace;
                    thread::spawn(move || terminate_group(pgid, grace));
                }
            }
            Command::Exited(task_id, pgid) => self.sched.unregister_process(task_id, pgid),
            Command::Lock(task_id, LockEvent::Waiting) => {
                let _ = self.sched.enter_wait(task_id);
            }
            Command::Lock(task_id, LockEvent::Acquired) => {
                let _ = self.sched.resume(task_id);
            }
            Command::Workspace(task_id, path) => self.sched.set_workspace(task_id, path),
            Command::Finished(task_id, outcome) => {
                let r = match outcome {
                    Ok(result) => self.sched.on_task_finished(task_id, result),
                    Err(reason) => self.sched.on_task_errored(task_id, &reason),
                };
                if let Err(e) = r {
                    // normal when the task was killed while its worker wound down
                    log::debug!("task {task_id}: late completion ignored: {e}");
                }
            }
            Command::WorkerDone(task_id) => {
                self.flags.lock().unwrap().remove(&task_id);
                if let Some(h) = self.workers.lock().unwrap().remove(&task_id) {
                    let _ = h.join();
                }
            }
            Command::Shutdown(_) => unreachable!("handled in run"),
        }
    }

    /// Reclaims the oldest running task while supervised processes exceed
    /// the memory budget.
    fn housekeeping(&mut self) {
        let Some(budget) = self.memory_budget else { return };
        let groups: Vec<Pid> = self
            .sched
            .run_queue()
            .into_iter()
            .filter_map(|id| self.sched.task(id))
            .flat_map(|t| t.child_process_ids.iter().copied())
            .collect();
        let used: u64 = groups.iter().map(|g| group_rss_bytes(*g)).sum();
        if used > budget {
            if let Some(victim) = self.sched.reclaim_oldest() {
                log::warn!("memory pressure ({used} > {budget} bytes): reclaimed task {victim}");
            }
        }
    }

    fn publish(&self) {
        *self.snapshot.write().unwrap() = self.sched.snapshot();
    }

    fn start_workers(&mut self) {
        for task_id in self.sched.take_admitted() {
            let Some(task) = self.sched.task(task_id).cloned() else { continue };
            if task.state != TaskState::Run {
                continue;
            }
            let flag = Arc::new(AtomicBool::new(false));
            self.flags.lock().unwrap().insert(task_id, flag.clone());
            let tx = self.tx.clone();
            let provider = self.provider.clone();
            let inspector = self.inspector.clone();
            let spawned = thread::Builder::new().name(format!("task-{task_id}")).spawn(move || {
                run_worker(task, tx.clone(), flag, provider, inspector);
                let _ = tx.send(Command::WorkerDone(task_id));
            });
            match spawned {
                Ok(h) => {
                    self.workers.lock().unwrap().insert(task_id, h);
                }
                Err(e) => {
                    let _ = self.sched.on_task_errored(task_id, &format!("cannot start worker: {e}"));
                }
            }
        }
    }
}

struct WorkerHooks {
    task_id: TaskId,
    tx: Sender<Command>,
    cancel: Arc<AtomicBool>,
}

impl SupervisionHooks for WorkerHooks {
    fn spawned(&self, pgid: Pid) {
        let _ = self.tx.send(Command::Spawned(self.task_id, pgid));
    }
    fn finished(&self, pgid: Pid) {
        let _ = self.tx.send(Command::Exited(self.task_id, pgid));
    }
    fn cancelled(&self) -> bool {
        self.cancel.load(Ordering::SeqCst)
    }
}

fn run_worker(
    task: crate::model::PrTask,
    tx: Sender<Command>,
    cancel: Arc<AtomicBool>,
    provider: Arc<dyn WorkspaceProvider>,
    inspector: Arc<Inspector>,
) {
    let task_id = task.task_id;
    let lock_tx = tx.clone();
    let outcome = match provider.derive(&task, &move |e| {
        let _ = lock_tx.send(Command::Lock(task_id, e));
    }) {
        Err(e) => Err(format!("workspace: {e}")),
        Ok(ws) => {
            let _ = tx.send(Command::Workspace(task_id, ws.path.clone()));
            let hooks = WorkerHooks { task_id, tx: tx.clone(), cancel: cancel.clone() };
            let r = if cancel.load(Ordering::SeqCst) {
                Ok(PipelineResult::new(task_id, vec![], vec![], crate::model::PipelineVerdict::Killed))
            } else {
                inspector.run_pipeline(&task, &ws.path, &hooks).map_err(|e| e.to_string())
            };
            inspector.builder.release_build_root(task_id);
            provider.release(task_id);
            r
        }
    };
    let _ = tx.send(Command::Finished(task_id, outcome));
}
