//! PR Scheduler and PR Killer.
//!
//! The scheduler owns every [`PrTask`] and is the only code that mutates
//! task state. New tasks enter a FIFO wait queue; [`Scheduler::admit`] moves
//! the head into the bounded run queue. The killer side retires superseded
//! generations, cancelled PRs and (on demand) the oldest running task, always
//! along `live -> Hanging -> Exit(Killed)`.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::journal::{Counters, JournalRecord, TransitionObserver};
use crate::model::{
    CommitId, ExitVerdict, PipelineResult, PipelineVerdict, PrEvent, PrTask, TaskId, TaskState, Timestamp,
};
use crate::process::Pid;

/// Terminal tasks kept for status queries.
pub const DEFAULT_HISTORY_LIMIT: usize = 1024;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SchedulerError {
    #[error("wait queue is full (capacity {capacity})")]
    WaitQueueFull { capacity: usize },
    #[error("task {task_id} is in {state}, expected {expected}")]
    IllegalState { task_id: TaskId, state: TaskState, expected: &'static str },
    #[error("unknown task {0}")]
    UnknownTask(TaskId),
    #[error("generation {generation} is not newer than live generation {live} of the same PR")]
    StaleGeneration { generation: u32, live: u32 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KillReason {
    Superseded,
    Reclaimed,
    Cancelled,
    Shutdown,
}

impl KillReason {
    pub fn as_str(self) -> &'static str {
        match self {
            KillReason::Superseded => "superseded",
            KillReason::Reclaimed => "reclaimed",
            KillReason::Cancelled => "cancelled",
            KillReason::Shutdown => "shutdown",
        }
    }
}

/// Returns a task's resources while it is in Hanging.
pub trait TaskReaper: Send {
    /// `process_groups` are the groups still registered to the task.
    fn reap(&mut self, task_id: TaskId, process_groups: Vec<Pid>, reason: KillReason);
}

#[derive(Debug, Default)]
pub struct NoopReaper;

impl TaskReaper for NoopReaper {
    fn reap(&mut self, _: TaskId, _: Vec<Pid>, _: KillReason) {}
}

#[derive(Clone, Debug)]
pub struct SchedulerConfig {
    pub max_run_queue: usize,
    pub wait_capacity: Option<usize>,
    /// When false, newer generations never retire older ones.
    pub supersession: bool,
    pub history_limit: usize,
}

impl SchedulerConfig {
    pub fn new(max_run_queue: usize) -> Self {
        Self { max_run_queue, wait_capacity: None, supersession: true, history_limit: DEFAULT_HISTORY_LIMIT }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KillCounters {
    pub superseded: u64,
    pub reclaimed: u64,
    pub cancelled: u64,
    pub shutdown: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSummary {
    pub task_id: TaskId,
    pub repo_id: String,
    pub pr_number: u64,
    pub generation: u32,
    pub head_commit: CommitId,
    pub state: TaskState,
    pub priority: i32,
    pub submitted_at: Timestamp,
    pub started_at: Option<Timestamp>,
    pub finished_at: Option<Timestamp>,
    pub verdict: Option<PipelineVerdict>,
    pub cpu_proxy: Option<u64>,
}

impl From<&PrTask> for TaskSummary {
    fn from(t: &PrTask) -> Self {
        Self {
            task_id: t.task_id,
            repo_id: t.repo_id.clone(),
            pr_number: t.pr_number,
            generation: t.generation,
            head_commit: t.head_commit.clone(),
            state: t.state,
            priority: t.priority,
            submitted_at: t.submitted_at,
            started_at: t.started_at,
            finished_at: t.finished_at,
            verdict: t.pipeline_result.as_ref().map(|r| r.verdict),
            cpu_proxy: t.pipeline_result.as_ref().map(|r| r.cpu_proxy),
        }
    }
}

/// Read-only copy of scheduler state.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StatusSnapshot {
    pub uptime_s: f64,
    pub max_run_queue: usize,
    pub wait_queue: Vec<TaskId>,
    pub run_queue: Vec<TaskId>,
    pub tasks: Vec<TaskSummary>,
    pub counters: Counters,
    pub kills: KillCounters,
    pub peak_running: usize,
}

pub struct Scheduler {
    config: SchedulerConfig,
    clock: Arc<dyn Clock>,
    tasks: BTreeMap<TaskId, PrTask>,
    wait: VecDeque<TaskId>,
    running: BTreeSet<TaskId>,
    generations: HashMap<(String, u64), u32>,
    next_task_id: TaskId,
    reaper: Box<dyn TaskReaper>,
    observers: Vec<Box<dyn TransitionObserver>>,
    counters: Counters,
    kills: KillCounters,
    peak_running: usize,
    terminal_order: VecDeque<TaskId>,
    admitted: Vec<TaskId>,
}

impl Scheduler {
    pub fn new(config: SchedulerConfig, clock: Arc<dyn Clock>) -> Self {
        assert!(config.max_run_queue >= 1, "max_run_queue must be >= 1");
        Self {
            config,
            clock,
            tasks: BTreeMap::new(),
            wait: VecDeque::new(),
            running: BTreeSet::new(),
            generations: HashMap::new(),
            next_task_id: 1,
            reaper: Box::new(NoopReaper),
            observers: Vec::new(),
            counters: Counters::default(),
            kills: KillCounters::default(),
            peak_running: 0,
            terminal_order: VecDeque::new(),
            admitted: Vec::new(),
        }
    }

    pub fn with_reaper(mut self, reaper: Box<dyn TaskReaper>) -> Self {
        self.reaper = reaper;
        self
    }

    pub fn add_observer(&mut self, observer: Box<dyn TransitionObserver>) {
        self.observers.push(observer);
    }

    pub fn max_run_queue(&self) -> usize {
        self.config.max_run_queue
    }

    pub fn now(&self) -> Timestamp {
        self.clock.now()
    }

    /// Allocates a task id and the next generation for the event's PR.
    pub fn create_task(&mut self, event: &PrEvent) -> PrTask {
        let key = (event.repo_id.clone(), event.pr_number);
        let generation = self.generations.get(&key).copied().unwrap_or(0) + 1;
        self.generations.insert(key, generation);
        let id = self.next_task_id;
        self.next_task_id += 1;
        PrTask::from_event(id, generation, event, self.clock.now())
    }

    /// Supersedes older generations of the same PR, then appends the task to
    /// the wait queue. Returns the ids of the tasks that were killed.
    pub fn submit(&mut self, task: PrTask) -> Result<Vec<TaskId>, SchedulerError> {
        if task.state != TaskState::Ready {
            return Err(SchedulerError::IllegalState { task_id: task.task_id, state: task.state, expected: "Ready" });
        }
        if let Some(live) = self.live_tasks_for(&task.repo_id, task.pr_number).iter().map(|t| t.generation).max() {
            if live >= task.generation {
                return Err(SchedulerError::StaleGeneration { generation: task.generation, live });
            }
        }
        if let Some(capacity) = self.config.wait_capacity {
            let freed = if self.config.supersession {
                self.wait
                    .iter()
                    .filter(|id| {
                        let t = &self.tasks[id];
                        t.repo_id == task.repo_id && t.pr_number == task.pr_number
                    })
                    .count()
            } else {
                0
            };
            if self.wait.len() - freed >= capacity {
                return Err(SchedulerError::WaitQueueFull { capacity });
            }
        }
        let killed = self.supersede(&task.repo_id, task.pr_number, task.generation);
        let id = task.task_id;
        let key = (task.repo_id.clone(), task.pr_number);
        let generation = self.generations.entry(key).or_insert(0);
        *generation = (*generation).max(task.generation);
        self.next_task_id = self.next_task_id.max(id + 1);
        self.tasks.insert(id, task);
        self.wait.push_back(id);
        self.counters.enqueued += 1;
        self.counters.live += 1;
        self.emit(id, None, TaskState::Ready, "submitted");
        Ok(killed)
    }

    /// Kills every live task of the PR whose generation is below
    /// `new_generation`.
    pub fn supersede(&mut self, repo_id: &str, pr_number: u64, new_generation: u32) -> Vec<TaskId> {
        if !self.config.supersession {
            return Vec::new();
        }
        let victims: Vec<TaskId> = self
            .live_tasks_for(repo_id, pr_number)
            .into_iter()
            .filter(|t| t.generation < new_generation)
            .map(|t| t.task_id)
            .collect();
        for id in &victims {
            self.kill(*id, KillReason::Superseded);
        }
        victims
    }

    /// Moves the head of the wait queue into the run queue if there is room.
    /// Lower priority values are admitted first; equal priorities keep FIFO
    /// order.
    pub fn admit(&mut self) -> Option<TaskId> {
        if self.running.len() >= self.config.max_run_queue || self.wait.is_empty() {
            return None;
        }
        let (idx, _) = self
            .wait
            .iter()
            .enumerate()
            .min_by_key(|(i, id)| (self.tasks[id].priority, *i))
            .expect("wait queue is non-empty");
        let id = self.wait.remove(idx).expect("index in range");
        self.set_state(id, TaskState::Run, "admitted").expect("Ready -> Run is legal");
        self.running.insert(id);
        self.peak_running = self.peak_running.max(self.running.len());
        self.admitted.push(id);
        Some(id)
    }

    pub fn admit_all(&mut self) -> Vec<TaskId> {
        let mut out = Vec::new();
        while let Some(id) = self.admit() {
            out.push(id);
        }
        out
    }

    /// Drains the ids admitted since the last call, for starting workers.
    pub fn take_admitted(&mut self) -> Vec<TaskId> {
        std::mem::take(&mut self.admitted)
    }

    /// Kills the Run-state task with the oldest start time.
    pub fn reclaim_oldest(&mut self) -> Option<TaskId> {
        let victim = self
            .running
            .iter()
            .map(|id| &self.tasks[id])
            .filter(|t| t.state == TaskState::Run)
            .min_by_key(|t| (t.started_at, t.task_id))
            .map(|t| t.task_id)?;
        self.kill(victim, KillReason::Reclaimed);
        Some(victim)
    }

    /// Kills every live task of the PR.
    pub fn cancel(&mut self, repo_id: &str, pr_number: u64) -> Vec<TaskId> {
        self.kill_matching(KillReason::Cancelled, |t| t.repo_id == repo_id && t.pr_number == pr_number)
    }

    /// Kills every live task.
    pub fn shutdown(&mut self) -> Vec<TaskId> {
        self.kill_matching(KillReason::Shutdown, |_| true)
    }

    fn kill_matching(&mut self, reason: KillReason, pred: impl Fn(&PrTask) -> bool) -> Vec<TaskId> {
        let victims: Vec<TaskId> =
            self.tasks.values().filter(|t| t.state.is_live() && pred(t)).map(|t| t.task_id).collect();
        for id in &victims {
            self.kill(*id, reason);
        }
        victims
    }

    /// Records a completed pipeline and frees the run-queue slot, then
    /// admits from the wait queue.
    pub fn on_task_finished(&mut self, task_id: TaskId, result: PipelineResult) -> Result<Vec<TaskId>, SchedulerError> {
        let state = self.state_of(task_id)?;
        if state != TaskState::Run {
            return Err(SchedulerError::IllegalState { task_id, state, expected: "Run" });
        }
        let verdict = result.verdict;
        self.tasks.get_mut(&task_id).expect("checked").pipeline_result = Some(result);
        match verdict {
            PipelineVerdict::Killed => self.kill(task_id, KillReason::Cancelled),
            _ => {
                let leftovers = self.take_processes(task_id);
                if !leftovers.is_empty() {
                    self.reaper.reap(task_id, leftovers, KillReason::Cancelled);
                }
                let exit = match verdict {
                    PipelineVerdict::Success => ExitVerdict::Pass,
                    _ => ExitVerdict::Fail,
                };
                self.set_state(task_id, TaskState::Exit(exit), &format!("pipeline {verdict:?}"))?;
                self.running.remove(&task_id);
            }
        }
        Ok(self.admit_all())
    }

    /// Ends a running task that could not execute its pipeline (for example
    /// its workspace could not be derived).
    pub fn on_task_errored(&mut self, task_id: TaskId, reason: &str) -> Result<Vec<TaskId>, SchedulerError> {
        let state = self.state_of(task_id)?;
        if state == TaskState::Wait {
            self.set_state(task_id, TaskState::Run, "resumed for failure")?;
        } else if state != TaskState::Run {
            return Err(SchedulerError::IllegalState { task_id, state, expected: "Run" });
        }
        let leftovers = self.take_processes(task_id);
        if !leftovers.is_empty() {
            self.reaper.reap(task_id, leftovers, KillReason::Cancelled);
        }
        self.set_state(task_id, TaskState::Exit(ExitVerdict::Fail), reason)?;
        self.running.remove(&task_id);
        Ok(self.admit_all())
    }

    /// Run -> Wait while the task blocks on a shared resource.
    pub fn enter_wait(&mut self, task_id: TaskId) -> Result<(), SchedulerError> {
        self.expect_state(task_id, TaskState::Run, "Run")?;
        self.set_state(task_id, TaskState::Wait, "blocked on workspace lock")
    }

    /// Wait -> Run once the resource is acquired.
    pub fn resume(&mut self, task_id: TaskId) -> Result<(), SchedulerError> {
        self.expect_state(task_id, TaskState::Wait, "Wait")?;
        self.set_state(task_id, TaskState::Run, "lock acquired")
    }

    /// Associates a process group with a live task. Returns false when the
    /// task is already terminal (or Hanging); the caller must then terminate
    /// the group itself.
    pub fn register_process(&mut self, task_id: TaskId, pgid: Pid) -> bool {
        match self.tasks.get_mut(&task_id) {
            Some(t) if matches!(t.state, TaskState::Run | TaskState::Wait) => {
                t.child_process_ids.insert(pgid);
                true
            }
            _ => false,
        }
    }

    pub fn unregister_process(&mut self, task_id: TaskId, pgid: Pid) {
        if let Some(t) = self.tasks.get_mut(&task_id) {
            t.child_process_ids.remove(&pgid);
        }
    }

    pub fn set_workspace(&mut self, task_id: TaskId, path: std::path::PathBuf) {
        if let Some(t) = self.tasks.get_mut(&task_id) {
            t.workspace_path = Some(path);
        }
    }

    pub fn set_priority(&mut self, task_id: TaskId, priority: i32) -> Result<(), SchedulerError> {
        let t = self.tasks.get_mut(&task_id).ok_or(SchedulerError::UnknownTask(task_id))?;
        t.priority = priority;
        Ok(())
    }

    pub fn task(&self, task_id: TaskId) -> Option<&PrTask> {
        self.tasks.get(&task_id)
    }

    pub fn tasks(&self) -> impl Iterator<Item = &PrTask> {
        self.tasks.values()
    }

    pub fn live_tasks_for(&self, repo_id: &str, pr_number: u64) -> Vec<&PrTask> {
        self.tasks.values().filter(|t| t.state.is_live() && t.repo_id == repo_id && t.pr_number == pr_number).collect()
    }

    pub fn wait_queue(&self) -> Vec<TaskId> {
        self.wait.iter().copied().collect()
    }

    pub fn run_queue(&self) -> Vec<TaskId> {
        self.running.iter().copied().collect()
    }

    pub fn running_len(&self) -> usize {
        self.running.len()
    }

    pub fn is_quiescent(&self) -> bool {
        self.wait.is_empty() && self.running.is_empty()
    }

    pub fn counters(&self) -> Counters {
        self.counters
    }

    pub fn kill_counters(&self) -> KillCounters {
        self.kills
    }

    pub fn peak_running(&self) -> usize {
        self.peak_running
    }

    pub fn snapshot(&self) -> StatusSnapshot {
        StatusSnapshot {
            uptime_s: 0.0,
            max_run_queue: self.config.max_run_queue,
            wait_queue: self.wait_queue(),
            run_queue: self.run_queue(),
            tasks: self.tasks.values().map(TaskSummary::from).collect(),
            counters: self.counters,
            kills: self.kills,
            peak_running: self.peak_running,
        }
    }

    fn state_of(&self, task_id: TaskId) -> Result<TaskState, SchedulerError> {
        self.tasks.get(&task_id).map(|t| t.state).ok_or(SchedulerError::UnknownTask(task_id))
    }

    fn expect_state(&self, task_id: TaskId, want: TaskState, name: &'static str) -> Result<(), SchedulerError> {
        let state = self.state_of(task_id)?;
        if state != want {
            return Err(SchedulerError::IllegalState { task_id, state, expected: name });
        }
        Ok(())
    }

    fn take_processes(&mut self, task_id: TaskId) -> Vec<Pid> {
        self.tasks
            .get_mut(&task_id)
            .map(|t| std::mem::take(&mut t.child_process_ids).into_iter().collect())
            .unwrap_or_default()
    }

    fn kill(&mut self, task_id: TaskId, reason: KillReason) {
        let Some(state) = self.tasks.get(&task_id).map(|t| t.state) else {
            return;
        };
        if !state.is_live() {
            return;
        }
        if state != TaskState::Hanging {
            self.set_state(task_id, TaskState::Hanging, reason.as_str()).expect("live -> Hanging is legal");
        }
        self.wait.retain(|id| *id != task_id);
        self.running.remove(&task_id);
        let groups = self.take_processes(task_id);
        self.reaper.reap(task_id, groups, reason);
        self.set_state(task_id, TaskState::Exit(ExitVerdict::Killed), reason.as_str())
            .expect("Hanging -> Exit(Killed) is legal");
        match reason {
            KillReason::Superseded => self.kills.superseded += 1,
            KillReason::Reclaimed => self.kills.reclaimed += 1,
            KillReason::Cancelled => self.kills.cancelled += 1,
            KillReason::Shutdown => self.kills.shutdown += 1,
        }
    }

    fn set_state(&mut self, task_id: TaskId, to: TaskState, reason: &str) -> Result<(), SchedulerError> {
        let now = self.clock.now();
        let task = self.tasks.get_mut(&task_id).ok_or(SchedulerError::UnknownTask(task_id))?;
        let from = task.state;
        task.transition(to, now).map_err(|_| SchedulerError::IllegalState {
            task_id,
            state: from,
            expected: "a legal predecessor",
        })?;
        if let TaskState::Exit(v) = to {
            self.counters.live -= 1;
            match v {
                ExitVerdict::Pass => self.counters.passed += 1,
                ExitVerdict::Fail => self.counters.failed += 1,
                ExitVerdict::Killed => self.counters.killed += 1,
            }
            self.terminal_order.push_back(task_id);
            while self.terminal_order.len() > self.config.history_limit {
                if let Some(old) = self.terminal_order.pop_front() {
                    self.tasks.remove(&old);
                }
            }
        }
        self.emit(task_id, Some(from), to, reason);
        Ok(())
    }

    fn emit(&mut self, task_id: TaskId, from: Option<TaskState>, to: TaskState, reason: &str) {
        if self.observers.is_empty() {
            return;
        }
        let record = JournalRecord::now(task_id, from, to, reason);
        for o in &mut self.observers {
            o.on_transition(&record);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ManualClock;
    use crate::journal::{replay_check, MemoryJournal};
    use crate::model::PrAction;
    use std::sync::Mutex;

    fn event(pr: u64) -> PrEvent {
        PrEvent {
            repo_id: "o/r".into(),
            pr_number: pr,
            action: PrAction::Opened,
            head_commit: CommitId::parse(&format!("{:040x}", pr)).unwrap(),
            source_branch: "f".into(),
            target_branch: "main".into(),
            clone_url: String::new(),
            delivery_id: String::new(),
            received_at: 0,
        }
    }

    fn sched(r: usize) -> (Scheduler, ManualClock, MemoryJournal) {
        let clock = ManualClock::new();
        let mut s = Scheduler::new(SchedulerConfig::new(r), Arc::new(clock.clone()));
        let j = MemoryJournal::default();
        s.add_observer(Box::new(j.clone()));
        (s, clock, j)
    }

    fn submit(s: &mut Scheduler, pr: u64) -> TaskId {
        let t = s.create_task(&event(pr));
        let id = t.task_id;
        s.submit(t).unwrap();
        id
    }

    fn pass(id: TaskId) -> PipelineResult {
        PipelineResult::new(id, vec![], vec![], PipelineVerdict::Success)
    }

    #[test]
    fn fifo_admission_with_single_slot() {
        let (mut s, _, _) = sched(1);
        let ids: Vec<_> = (1..=3).map(|pr| submit(&mut s, pr)).collect();
        let mut order = s.admit_all();
        while let Some(&id) = s.run_queue().first() {
            order.extend(s.on_task_finished(id, pass(id)).unwrap());
        }
        assert_eq!(order, ids);
    }

    #[test]
    fn bounded_wait_queue_rejects() {
        let clock = ManualClock::new();
        let mut cfg = SchedulerConfig::new(1);
        cfg.wait_capacity = Some(2);
        let mut s = Scheduler::new(cfg, Arc::new(clock));
        submit(&mut s, 1);
        submit(&mut s, 2);
        let t = s.create_task(&event(3));
        assert_eq!(s.submit(t), Err(SchedulerError::WaitQueueFull { capacity: 2 }));
        // a resubmission of a queued PR frees its own slot
        let t = s.create_task(&event(2));
        assert_eq!(s.submit(t).unwrap().len(), 1);
    }

    #[test]
    fn hundred_equal_priority_tasks_admit_in_submission_order() {
        let (mut s, _, _) = sched(3);
        let submitted: Vec<_> = (1..=100).map(|pr| submit(&mut s, pr)).collect();
        let mut log = s.admit_all();
        while !s.is_quiescent() {
            let id = s.run_queue()[0];
            log.extend(s.on_task_finished(id, pass(id)).unwrap());
        }
        assert_eq!(log, submitted);
    }

    #[test]
    fn admit_respects_capacity() {
        let (mut s, _, _) = sched(2);
        assert_eq!(s.admit(), None);
        for pr in 1..=3 {
            submit(&mut s, pr);
        }
        assert!(s.admit().is_some());
        assert!(s.admit().is_some());
        assert_eq!(s.admit(), None);
        assert_eq!(s.running_len(), 2);
        assert_eq!(s.wait_queue().len(), 1);
    }

    #[test]
    fn head_of_queue_is_admitted_after_exit() {
        // trace oracle: with R=3, after each completion the admitted task is
        // exactly the front of the wait queue observed just before.
        let (mut s, clock, _) = sched(3);
        for pr in 1..=10 {
            submit(&mut s, pr);
        }
        s.admit_all();
        let mut step = 0;
        while !s.is_quiescent() {
            clock.advance(1);
            let expected_next = s.wait_queue().first().copied();
            let victim = s.run_queue()[step % s.running_len()];
            let admitted = s.on_task_finished(victim, pass(victim)).unwrap();
            assert_eq!(admitted.first().copied(), expected_next);
            step += 1;
        }
    }

    #[test]
    fn lower_priority_value_admitted_first() {
        let (mut s, _, _) = sched(1);
        let a = submit(&mut s, 1);
        let b = submit(&mut s, 2);
        let c = submit(&mut s, 3);
        s.set_priority(c, -1).unwrap();
        assert_eq!(s.admit(), Some(c));
        s.on_task_finished(c, pass(c)).unwrap();
        assert_eq!(s.run_queue(), vec![a]);
        let _ = b;
    }

    type Reaped = (TaskId, Vec<Pid>, KillReason);

    #[derive(Clone, Default)]
    struct Recorder(Arc<Mutex<Vec<Reaped>>>);
    impl TaskReaper for Recorder {
        fn reap(&mut self, id: TaskId, groups: Vec<Pid>, reason: KillReason) {
            self.0.lock().unwrap().push((id, groups, reason));
        }
    }

    #[test]
    fn running_generation_is_superseded() {
        let rec = Recorder::default();
        let clock = ManualClock::new();
        let mut s = Scheduler::new(SchedulerConfig::new(2), Arc::new(clock)).with_reaper(Box::new(rec.clone()));
        let j = MemoryJournal::default();
        s.add_observer(Box::new(j.clone()));
        let g1 = submit(&mut s, 7);
        assert_eq!(s.admit(), Some(g1));
        assert!(s.register_process(g1, 4242));
        let t2 = s.create_task(&event(7));
        assert_eq!(t2.generation, 2);
        let g2 = t2.task_id;
        assert_eq!(s.submit(t2).unwrap(), vec![g1]);
        assert_eq!(s.task(g1).unwrap().state, TaskState::Exit(ExitVerdict::Killed));
        assert!(s.task(g1).unwrap().child_process_ids.is_empty());
        assert_eq!(rec.0.lock().unwrap()[0], (g1, vec![4242], KillReason::Superseded));
        assert_eq!(s.admit(), Some(g2));
        s.on_task_finished(g2, pass(g2)).unwrap();
        assert_eq!(s.task(g2).unwrap().state, TaskState::Exit(ExitVerdict::Pass));
        let recs = j.records();
        let killed =
            recs.iter().find(|r| r.task_id == g1 && r.transition.to == TaskState::Exit(ExitVerdict::Killed)).unwrap();
        assert_eq!(killed.reason, "superseded");
        replay_check(&recs).unwrap();
    }

    #[test]
    fn no_live_tasks_means_nothing_superseded() {
        let (mut s, _, _) = sched(1);
        assert!(s.supersede("o/r", 1, 5).is_empty());
        let t = s.create_task(&event(1));
        assert_eq!(s.submit(t).unwrap(), Vec::<TaskId>::new());
    }

    #[test]
    fn ready_generation_killed_without_running() {
        let (mut s, _, j) = sched(1);
        let blocker = submit(&mut s, 1);
        s.admit();
        let g1 = submit(&mut s, 2);
        let g2 = submit(&mut s, 2);
        let t = s.task(g1).unwrap();
        assert_eq!(t.state, TaskState::Exit(ExitVerdict::Killed));
        assert!(t.started_at.is_none());
        assert!(t.pipeline_result.is_none());
        assert!(!j.records().iter().any(|r| r.task_id == g1 && r.transition.to == TaskState::Run));
        s.on_task_finished(blocker, pass(blocker)).unwrap();
        assert_eq!(s.run_queue(), vec![g2]);
    }

    #[test]
    fn stale_generation_is_rejected() {
        let (mut s, _, _) = sched(1);
        let old = s.create_task(&event(1));
        submit(&mut s, 1);
        assert!(matches!(s.submit(old), Err(SchedulerError::StaleGeneration { .. })));
    }

    #[test]
    fn reclaim_kills_oldest_first() {
        let (mut s, clock, _) = sched(3);
        let mut started = Vec::new();
        for pr in 1..=3 {
            submit(&mut s, pr);
            clock.advance(10);
            started.push(s.admit().unwrap());
        }
        let mut kills = Vec::new();
        while let Some(id) = s.reclaim_oldest() {
            kills.push(id);
        }
        // sort oracle
        let mut by_start = started.clone();
        by_start.sort_by_key(|id| s.task(*id).unwrap().started_at);
        assert_eq!(kills, by_start);
        assert_eq!(s.reclaim_oldest(), None);
        assert_eq!(s.kill_counters().reclaimed, 3);
    }

    #[test]
    fn reclaim_skips_waiting_tasks() {
        let (mut s, clock, _) = sched(2);
        let a = submit(&mut s, 1);
        s.admit();
        clock.advance(5);
        let b = submit(&mut s, 2);
        s.admit();
        s.enter_wait(a).unwrap();
        assert_eq!(s.reclaim_oldest(), Some(b));
    }

    #[test]
    fn cancel_kills_ready_and_running() {
        // two live tasks for one PR only exist without supersession
        let clock = ManualClock::new();
        let mut cfg = SchedulerConfig::new(2);
        cfg.supersession = false;
        let mut s = Scheduler::new(cfg, Arc::new(clock));
        let x = submit(&mut s, 9);
        s.admit();
        let y = submit(&mut s, 9);
        let mut killed = s.cancel("o/r", 9);
        killed.sort();
        assert_eq!(killed, vec![x, y]);
        assert!(s.wait_queue().is_empty() && s.run_queue().is_empty());
        assert!(s.cancel("o/r", 12345).is_empty());
    }

    #[test]
    fn finish_requires_run_state() {
        let (mut s, _, _) = sched(1);
        let a = submit(&mut s, 1);
        assert!(matches!(s.on_task_finished(a, pass(a)), Err(SchedulerError::IllegalState { .. })));
        s.admit();
        let r = PipelineResult::new(a, vec![], vec![], PipelineVerdict::PrebuildFailed);
        s.on_task_finished(a, r).unwrap();
        assert_eq!(s.task(a).unwrap().state, TaskState::Exit(ExitVerdict::Fail));
        assert!(matches!(s.on_task_finished(a, pass(a)), Err(SchedulerError::IllegalState { .. })));
        assert!(matches!(s.on_task_finished(99, pass(99)), Err(SchedulerError::UnknownTask(99))));
    }

    #[test]
    fn run_queue_refills_within_one_tick() {
        let (mut s, _, _) = sched(3);
        for pr in 1..=6 {
            submit(&mut s, pr);
        }
        s.admit_all();
        assert_eq!(s.running_len(), 3);
        let first = s.run_queue()[0];
        s.on_task_finished(first, pass(first)).unwrap();
        assert_eq!(s.running_len(), 3);
        assert_eq!(s.wait_queue().len(), 2);
    }

    #[test]
    fn wait_and_resume() {
        let (mut s, _, j) = sched(1);
        let a = submit(&mut s, 1);
        s.admit();
        s.enter_wait(a).unwrap();
        assert!(s.enter_wait(a).is_err());
        s.resume(a).unwrap();
        s.on_task_finished(a, pass(a)).unwrap();
        let seq: Vec<_> = j.records().iter().map(|r| r.transition.to.to_string()).collect();
        assert_eq!(seq, ["Ready", "Run", "Wait", "Run", "Exit(Pass)"]);
    }

    #[test]
    fn counters_are_conserved() {
        let (mut s, _, _) = sched(2);
        for pr in [1, 2, 2, 3, 4] {
            submit(&mut s, pr);
            assert!(s.counters().conserved());
        }
        s.admit_all();
        s.cancel("o/r", 3);
        assert!(s.counters().conserved());
    }

    #[test]
    fn registration_refused_for_dead_task() {
        let (mut s, _, _) = sched(1);
        let a = submit(&mut s, 1);
        assert!(!s.register_process(a, 10), "Ready tasks own no processes");
        s.admit();
        s.cancel("o/r", 1);
        assert!(!s.register_process(a, 10));
    }
}
