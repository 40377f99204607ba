//! Append-only lifecycle journal (`state_dir/journal.ndjson`).

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::clock::unix_millis;
use crate::model::{validate_transition, ExitVerdict, TaskId, TaskState};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    /// `None` marks task creation.
    pub from: Option<TaskState>,
    pub to: TaskState,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalRecord {
    /// Unix milliseconds.
    pub ts: u64,
    pub task_id: TaskId,
    pub transition: Transition,
    pub reason: String,
}

impl JournalRecord {
    pub fn now(task_id: TaskId, from: Option<TaskState>, to: TaskState, reason: impl Into<String>) -> Self {
        Self { ts: unix_millis(), task_id, transition: Transition { from, to }, reason: reason.into() }
    }
}

/// Receives every state change the scheduler performs.
pub trait TransitionObserver: Send {
    fn on_transition(&mut self, record: &JournalRecord);
}

impl<F: FnMut(&JournalRecord) + Send> TransitionObserver for F {
    fn on_transition(&mut self, record: &JournalRecord) {
        self(record)
    }
}

/// Newline-delimited JSON writer, flushed per record.
pub struct Journal<W: Write + Send> {
    out: W,
}

impl Journal<File> {
    pub fn open(path: &Path) -> io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { out: file })
    }
}

impl<W: Write + Send> Journal<W> {
    pub fn new(out: W) -> Self {
        Self { out }
    }

    pub fn append(&mut self, record: &JournalRecord) -> io::Result<()> {
        let mut line = serde_json::to_vec(record).map_err(io::Error::other)?;
        line.push(b'\n');
        self.out.write_all(&line)?;
        self.out.flush()
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write + Send> TransitionObserver for Journal<W> {
    fn on_transition(&mut self, record: &JournalRecord) {
        if let Err(e) = self.append(record) {
            log::error!("journal write failed: {e}");
        }
    }
}

/// Observer that keeps records in memory; clones share the same buffer.
#[derive(Clone, Default)]
pub struct MemoryJournal {
    records: Arc<Mutex<Vec<JournalRecord>>>,
}

impl MemoryJournal {
    pub fn records(&self) -> Vec<JournalRecord> {
        self.records.lock().unwrap().clone()
    }
}

impl TransitionObserver for MemoryJournal {
    fn on_transition(&mut self, record: &JournalRecord) {
        self.records.lock().unwrap().push(record.clone());
    }
}

pub fn read_journal(path: &Path) -> io::Result<Vec<JournalRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?);
    }
    Ok(out)
}

#[derive(Debug, PartialEq, Eq)]
pub struct JournalViolation {
    pub task_id: TaskId,
    pub index: usize,
    pub detail: String,
}

/// Replays records per task: the first must create the task in Ready, each
/// later one must continue from the previous state along a legal edge.
pub fn replay_check(records: &[JournalRecord]) -> Result<BTreeMap<TaskId, TaskState>, JournalViolation> {
    let mut states: BTreeMap<TaskId, TaskState> = BTreeMap::new();
    for (index, rec) in records.iter().enumerate() {
        let violation = |detail: String| JournalViolation { task_id: rec.task_id, index, detail };
        match (states.get(&rec.task_id).copied(), rec.transition.from) {
            (None, None) if rec.transition.to == TaskState::Ready => {}
            (None, _) => return Err(violation("task not created in Ready".into())),
            (Some(_), None) => return Err(violation("task created twice".into())),
            (Some(cur), Some(from)) => {
                if cur != from {
                    return Err(violation(format!("record says from {from} but task is in {cur}")));
                }
                if !validate_transition(from, rec.transition.to) {
                    return Err(violation(format!("illegal edge {from} -> {}", rec.transition.to)));
                }
            }
        }
        states.insert(rec.task_id, rec.transition.to);
    }
    Ok(states)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    pub enqueued: u64,
    pub passed: u64,
    pub failed: u64,
    pub killed: u64,
    pub live: u64,
}

impl Counters {
    pub fn conserved(&self) -> bool {
        self.enqueued == self.passed + self.failed + self.killed + self.live
    }
}

pub fn counters_from_journal(records: &[JournalRecord]) -> Counters {
    let mut c = Counters::default();
    for rec in records {
        match (rec.transition.from, rec.transition.to) {
            (None, _) => c.enqueued += 1,
            (_, TaskState::Exit(ExitVerdict::Pass)) => c.passed += 1,
            (_, TaskState::Exit(ExitVerdict::Fail)) => c.failed += 1,
            (_, TaskState::Exit(ExitVerdict::Killed)) => c.killed += 1,
            _ => {}
        }
    }
    c.live = c.enqueued - c.passed - c.failed - c.killed;
    c
}
