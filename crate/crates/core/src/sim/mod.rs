//! Workload simulator. Replays synthetic pull-request traces through the
//! real scheduler on a virtual clock, with module costs taken from a cost
//! model, or through the running engine with real processes (`live`).

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::clock::{ManualClock, NANOS_PER_SEC};
use crate::config::ServiceConfig;
use crate::model::{
    CheckResult, CheckStatus, CommitId, PipelineResult, PipelineVerdict, PluginDescriptor, PluginGroup, PrAction,
    PrEvent, TaskId, TaskState, Timestamp,
};
use crate::modulator::load_store;
use crate::scheduler::{Scheduler, SchedulerConfig};

pub mod live;
pub use live::{compare_live, replay_live, LiveOptions};

pub const SIM_REPO: &str = "sim/repo";

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("empty trace")]
    EmptyTrace,
    #[error("plugin store: {0}")]
    Store(String),
    #[error("scheduler: {0}")]
    Scheduler(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Slot {
    pub duration_s: f64,
    pub arrivals: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    pub seed: u64,
    pub slots: Vec<Slot>,
    pub duplication_fraction: f64,
    pub prebuild_fail_fraction: f64,
    /// Seconds per module name; modules missing from the map cost nothing.
    /// `None` selects integration mode (real processes).
    #[serde(default)]
    pub module_cost_model: Option<BTreeMap<String, f64>>,
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(SimError::InvalidSpec(format!("{name} must be in [0, 1], got {v}")))
            }
        };
        frac("duplication_fraction", self.duplication_fraction)?;
        frac("prebuild_fail_fraction", self.prebuild_fail_fraction)?;
        for (i, s) in self.slots.iter().enumerate() {
            if !(s.duration_s.is_finite() && s.duration_s > 0.0) {
                return Err(SimError::InvalidSpec(format!("slots[{i}].duration_s must be positive")));
            }
        }
        if let Some(costs) = &self.module_cost_model {
            for (name, c) in costs {
                if !(c.is_finite() && *c >= 0.0) {
                    return Err(SimError::InvalidSpec(format!("module_cost_model.{name} must be >= 0")));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let spec: Self = serde_json::from_str(text).map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self, SimError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| SimError::InvalidSpec(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn total_arrivals(&self) -> u64 {
        self.slots.iter().map(|s| s.arrivals as u64).sum()
    }
}

/// Synthetic working day: 28 half-hour slots (07:00 to 21:00) with a
/// morning and an afternoon peak. 40% duplication, 30% pre-build failures.
pub fn default_spec() -> WorkloadSpec {
    let arrivals = [2, 3, 5, 6, 8, 10, 12, 11, 9, 8, 7, 9, 11, 13, 14, 12, 10, 9, 8, 7, 6, 5, 4, 4, 3, 3, 2, 2];
    WorkloadSpec {
        seed: 2024,
        slots: arrivals.iter().map(|&a| Slot { duration_s: 1800.0, arrivals: a }).collect(),
        duplication_fraction: 0.4,
        prebuild_fail_fraction: 0.3,
        module_cost_model: Some(default_cost_model()),
    }
}

/// Seconds per built-in module: cheap native checks, heavier analysis tools,
/// and minutes-long platform builds.
pub fn default_cost_model() -> BTreeMap<String, f64> {
    [
        ("clang-format", 8.0),
        ("cppcheck", 40.0),
        ("pylint", 25.0),
        ("indent", 2.0),
        ("doc-tag", 10.0),
        ("doc-build", 45.0),
        ("scancode", 60.0),
        ("file-size", 1.0),
        ("newline", 1.0),
        ("nobody", 1.0),
        ("signed-off", 1.0),
        ("hardcoded-path", 2.0),
        ("executable", 1.0),
        ("timestamp", 1.0),
        ("sloccount", 6.0),
        ("flawfinder", 20.0),
        ("tizen", 240.0),
        ("android", 300.0),
        ("ubuntu", 180.0),
        ("yocto", 360.0),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_owned(), v))
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub slot: usize,
    pub event: PrEvent,
    /// Pre-build module this submission fails, if any.
    pub fail_module: Option<String>,
}

impl TraceEvent {
    pub fn is_resubmission(&self) -> bool {
        self.event.action == PrAction::Synchronized
    }
}

fn seconds_to_ns(s: f64) -> Timestamp {
    (s * NANOS_PER_SEC as f64).round() as Timestamp
}

fn ns_to_seconds(t: Timestamp) -> f64 {
    t as f64 / NANOS_PER_SEC as f64
}

/// Every arrival of a slot is stamped at the slot's start. In each slot,
/// `floor(duplication_fraction * arrivals)` events resubmit a PR number
/// first opened earlier in the same slot, and
/// `floor(prebuild_fail_fraction * arrivals)` events carry a failing
/// pre-build module.
pub fn generate_trace(spec: &WorkloadSpec, prebuild_modules: &[String]) -> Result<Vec<TraceEvent>, SimError> {
    spec.validate()?;
    let mut rng = rand::rngs::StdRng::seed_from_u64(spec.seed);
    let mut out = Vec::new();
    let mut next_pr = 1u64;
    let mut slot_start = 0.0f64;
    let mut delivery = 0u64;
    for (slot_idx, slot) in spec.slots.iter().enumerate() {
        let a = slot.arrivals as usize;
        let dups = if a == 0 { 0 } else { ((spec.duplication_fraction * a as f64).floor() as usize).min(a - 1) };
        let fails = (spec.prebuild_fail_fraction * a as f64).floor() as usize;
        // position 0 always opens a new PR so every resubmission has a target
        let mut dup_positions: Vec<usize> = (1..a).collect();
        dup_positions.shuffle(&mut rng);
        let dup_set: BTreeSet<usize> = dup_positions.into_iter().take(dups).collect();
        let mut fail_positions: Vec<usize> = (0..a).collect();
        fail_positions.shuffle(&mut rng);
        let fail_set: BTreeSet<usize> = fail_positions.into_iter().take(fails).collect();

        let mut opened: Vec<u64> = Vec::new();
        for pos in 0..a {
            let (pr_number, action) = if dup_set.contains(&pos) {
                (*opened.choose(&mut rng).expect("position 0 opened a PR"), PrAction::Synchronized)
            } else {
                let n = next_pr;
                next_pr += 1;
                opened.push(n);
                (n, PrAction::Opened)
            };
            let fail_module = if fail_set.contains(&pos) && !prebuild_modules.is_empty() {
                Some(prebuild_modules[rng.gen_range(0..prebuild_modules.len())].clone())
            } else {
                None
            };
            let sha: String = (0..40).map(|_| char::from_digit(rng.gen_range(0..16), 16).unwrap()).collect();
            delivery += 1;
            out.push(TraceEvent {
                slot: slot_idx,
                event: PrEvent {
                    repo_id: SIM_REPO.into(),
                    pr_number,
                    action,
                    head_commit: CommitId::parse(&sha).expect("generated sha is valid"),
                    source_branch: format!("pr-{pr_number}"),
                    target_branch: "main".into(),
                    clone_url: String::new(),
                    delivery_id: format!("sim-{delivery}"),
                    received_at: seconds_to_ns(slot_start),
                },
                fail_module,
            });
        }
        slot_start += slot.duration_s;
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Policy {
    /// No supersession and no pre-build gating.
    Baseline,
    /// Supersession plus pre-build gating.
    Gated,
}

impl std::str::FromStr for Policy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Policy::Baseline),
            "gated" | "lightci" => Ok(Policy::Gated),
            other => Err(format!("unknown policy {other:?}; expected baseline or gated")),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SimMetrics {
    pub events_total: u64,
    pub unique_prs: u64,
    /// Pipelines that ran to completion.
    pub executed_pipelines: u64,
    /// Sum of cpu_proxy, including modules started by tasks later killed.
    pub modules_executed: u64,
    pub tasks_killed_superseded: u64,
    pub tasks_killed_reclaimed: u64,
    pub peak_concurrent_running: u64,
    pub makespan_s: f64,
    pub max_task_sojourn_s: f64,
}

/// Module plan of one simulated pipeline: start offsets and durations in ns.
struct SimPipeline {
    modules: Vec<(String, PluginGroup, Timestamp, Timestamp)>,
    duration: Timestamp,
    failed_at: Option<String>,
}

fn plan_pipeline(
    pre: &[PluginDescriptor],
    post: &[PluginDescriptor],
    costs: &BTreeMap<String, f64>,
    fail_module: Option<&str>,
    gated: bool,
    lanes: usize,
) -> SimPipeline {
    let cost = |name: &str| seconds_to_ns(costs.get(name).copied().unwrap_or(0.0));
    let mut modules = Vec::new();
    let mut t = 0;
    let mut failed_at = None;
    for d in pre {
        let c = cost(&d.name);
        modules.push((d.name.clone(), PluginGroup::PreBuild, t, c));
        t += c;
        if fail_module == Some(d.name.as_str()) && d.is_blocking() {
            failed_at = Some(d.name.clone());
            if gated {
                return SimPipeline { modules, duration: t, failed_at };
            }
        }
    }
    // list scheduling in plan order onto the earliest free lane
    let lanes = lanes.max(1).min(post.len().max(1));
    let mut free = vec![t; lanes];
    for d in post {
        let lane = (0..lanes).min_by_key(|&i| (free[i], i)).expect("at least one lane");
        let c = cost(&d.name);
        modules.push((d.name.clone(), PluginGroup::PostBuild, free[lane], c));
        free[lane] += c;
    }
    let duration = free.into_iter().max().unwrap_or(t).max(t);
    SimPipeline { modules, duration, failed_at }
}

impl SimPipeline {
    fn result(&self, task_id: TaskId) -> PipelineResult {
        let (mut pre, mut post) = (Vec::new(), Vec::new());
        for (name, group, _, dur) in &self.modules {
            let status =
                if self.failed_at.as_deref() == Some(name.as_str()) { CheckStatus::Fail } else { CheckStatus::Pass };
            let r = CheckResult::new(name, status, dur / 1_000_000, "");
            match group {
                PluginGroup::PreBuild => pre.push(r),
                PluginGroup::PostBuild => post.push(r),
            }
        }
        let verdict = if self.failed_at.is_some() { PipelineVerdict::PrebuildFailed } else { PipelineVerdict::Success };
        PipelineResult::new(task_id, pre, post, verdict)
    }

    /// Modules that had started strictly before `elapsed`.
    fn started_before(&self, elapsed: Timestamp) -> u64 {
        self.modules.iter().filter(|(_, _, start, _)| *start < elapsed).count() as u64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Completion(TaskId),
    Arrival(usize),
}

/// Replays `trace` on a virtual clock. Arrivals at one instant are all
/// submitted before any admission.
pub fn replay(
    trace: &[TraceEvent],
    policy: Policy,
    config: &ServiceConfig,
    costs: &BTreeMap<String, f64>,
) -> Result<SimMetrics, SimError> {
    if trace.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let store = load_store(Path::new("/nonexistent"), config).map_err(|e| SimError::Store(e.to_string()))?;
    let pre = store.execution_plan(PluginGroup::PreBuild);
    let post = store.execution_plan(PluginGroup::PostBuild);
    let gated = policy == Policy::Gated;
    let r = config.max_run_queue.max(1);

    let clock = ManualClock::new();
    let mut sched_cfg = SchedulerConfig::new(r);
    sched_cfg.supersession = gated;
    sched_cfg.history_limit = usize::MAX;
    let mut sched = Scheduler::new(sched_cfg, Arc::new(clock.clone()));

    let mut queue: BinaryHeap<Reverse<(Timestamp, Ev)>> = BinaryHeap::new();
    for (i, ev) in trace.iter().enumerate() {
        queue.push(Reverse((ev.event.received_at, Ev::Arrival(i))));
    }
    let first_arrival = trace.iter().map(|e| e.event.received_at).min().unwrap_or(0);
    let mut pipelines: HashMap<TaskId, (SimPipeline, Timestamp)> = HashMap::new();
    let mut metrics = SimMetrics {
        events_total: trace.len() as u64,
        unique_prs: trace.iter().map(|e| e.event.pr_number).collect::<BTreeSet<_>>().len() as u64,
        ..Default::default()
    };
    let mut last_exit = first_arrival;
    let mut origin: HashMap<TaskId, usize> = HashMap::new();

    while let Some(Reverse((t, _))) = queue.peek().copied() {
        clock.set(t);
        // everything due at this instant: completions first, then arrivals
        while let Some(Reverse((t2, ev))) = queue.peek().copied() {
            if t2 != t {
                break;
            }
            queue.pop();
            match ev {
                Ev::Completion(id) => {
                    if sched.task(id).map(|x| x.state) != Some(TaskState::Run) {
                        continue;
                    }
                    let (p, _) = &pipelines[&id];
                    let result = p.result(id);
                    metrics.modules_executed += result.cpu_proxy;
                    metrics.executed_pipelines += 1;
                    sched.on_task_finished(id, result).map_err(|e| SimError::Scheduler(e.to_string()))?;
                    last_exit = t;
                }
                Ev::Arrival(i) => {
                    let te = &trace[i];
                    let task = sched.create_task(&te.event);
                    origin.insert(task.task_id, i);
                    let killed = sched.submit(task).map_err(|e| SimError::Scheduler(e.to_string()))?;
                    for k in killed {
                        if let Some((p, started)) = pipelines.get(&k) {
                            metrics.modules_executed += p.started_before(t - started);
                        }
                        last_exit = t;
                    }
                }
            }
        }
        // on_task_finished admits on its own; take_admitted sees both paths
        sched.admit_all();
        for id in sched.take_admitted() {
            let fail = trace[origin[&id]].fail_module.as_deref();
            let p = plan_pipeline(&pre, &post, costs, fail, gated, r);
            queue.push(Reverse((t + p.duration, Ev::Completion(id))));
            pipelines.insert(id, (p, t));
        }
    }

    let kills = sched.kill_counters();
    metrics.tasks_killed_superseded = kills.superseded;
    metrics.tasks_killed_reclaimed = kills.reclaimed;
    metrics.peak_concurrent_running = sched.peak_running() as u64;
    metrics.makespan_s = ns_to_seconds(last_exit - first_arrival);
    metrics.max_task_sojourn_s =
        sched.tasks().filter_map(|t| Some(ns_to_seconds(t.finished_at? - t.submitted_at))).fold(0.0, f64::max);
    Ok(metrics)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub slot: usize,
    pub arrivals: u32,
    pub baseline_makespan_s: f64,
    pub gated_makespan_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub seed: u64,
    pub max_run_queue: usize,
    pub baseline: SimMetrics,
    pub gated: SimMetrics,
    /// 1 - gated.modules_executed / baseline.modules_executed, in percent.
    pub cpu_saving_pct: f64,
    pub makespan_saving_pct: f64,
    /// Makespan of each slot replayed alone, ordered by arrivals.
    pub curve: Vec<CurvePoint>,
}

pub fn saving_pct(baseline: u64, gated: u64) -> f64 {
    if baseline == 0 {
        0.0
    } else {
        (1.0 - gated as f64 / baseline as f64) * 100.0
    }
}

/// Pre-build module names of the effective plan, for failure injection.
pub fn prebuild_modules(config: &ServiceConfig) -> Result<Vec<String>, SimError> {
    let store = load_store(Path::new("/nonexistent"), config).map_err(|e| SimError::Store(e.to_string()))?;
    Ok(store.execution_plan(PluginGroup::PreBuild).into_iter().filter(|d| d.is_blocking()).map(|d| d.name).collect())
}

pub fn cost_model(spec: &WorkloadSpec) -> Result<&BTreeMap<String, f64>, SimError> {
    spec.module_cost_model
        .as_ref()
        .ok_or_else(|| SimError::InvalidSpec("module_cost_model is required for virtual-clock replay".into()))
}

/// Runs both policies over the same trace.
pub fn compare(spec: &WorkloadSpec, config: &ServiceConfig) -> Result<Comparison, SimError> {
    let costs = cost_model(spec)?;
    let trace = generate_trace(spec, &prebuild_modules(config)?)?;
    let baseline = replay(&trace, Policy::Baseline, config, costs)?;
    let gated = replay(&trace, Policy::Gated, config, costs)?;
    let mut curve = Vec::new();
    for (slot, s) in spec.slots.iter().enumerate() {
        let mut part: Vec<TraceEvent> = trace.iter().filter(|e| e.slot == slot).cloned().collect();
        if part.is_empty() {
            continue;
        }
        for e in &mut part {
            e.event.received_at = 0;
        }
        curve.push(CurvePoint {
            slot,
            arrivals: s.arrivals,
            baseline_makespan_s: replay(&part, Policy::Baseline, config, costs)?.makespan_s,
            gated_makespan_s: replay(&part, Policy::Gated, config, costs)?.makespan_s,
        });
    }
    curve.sort_by_key(|p| (p.arrivals, p.slot));
    Ok(Comparison::new(spec.seed, config.max_run_queue, baseline, gated, curve))
}

impl Comparison {
    pub fn new(
        seed: u64,
        max_run_queue: usize,
        baseline: SimMetrics,
        gated: SimMetrics,
        curve: Vec<CurvePoint>,
    ) -> Self {
        Self {
            seed,
            max_run_queue,
            cpu_saving_pct: saving_pct(baseline.modules_executed, gated.modules_executed),
            makespan_saving_pct: if baseline.makespan_s > 0.0 {
                (1.0 - gated.makespan_s / baseline.makespan_s) * 100.0
            } else {
                0.0
            },
            baseline,
            gated,
            curve,
        }
    }

    pub fn curve_csv(&self) -> String {
        let mut out = String::from("slot,arrivals,baseline_makespan_s,gated_makespan_s\n");
        for p in &self.curve {
            out.push_str(&format!("{},{},{},{}\n", p.slot, p.arrivals, p.baseline_makespan_s, p.gated_makespan_s));
        }
        out
    }

    pub fn table(&self) -> String {
        let row = |name: &str, b: String, g: String| format!("{name:<26}{b:>14}{g:>14}\n");
        let (b, g) = (&self.baseline, &self.gated);
        let mut out = row("metric", "baseline".into(), "gated".into());
        out += &row("events_total", b.events_total.to_string(), g.events_total.to_string());
        out += &row("unique_prs", b.unique_prs.to_string(), g.unique_prs.to_string());
        out += &row("executed_pipelines", b.executed_pipelines.to_string(), g.executed_pipelines.to_string());
        out += &row("modules_executed", b.modules_executed.to_string(), g.modules_executed.to_string());
        out += &row("killed_superseded", b.tasks_killed_superseded.to_string(), g.tasks_killed_superseded.to_string());
        out += &row(
            "peak_concurrent_running",
            b.peak_concurrent_running.to_string(),
            g.peak_concurrent_running.to_string(),
        );
        out += &row("makespan_s", format!("{:.1}", b.makespan_s), format!("{:.1}", g.makespan_s));
        out +=
            &row("max_task_sojourn_s", format!("{:.1}", b.max_task_sojourn_s), format!("{:.1}", g.max_task_sojourn_s));
        out += &format!(
            "cpu proxy saving: {:.1}%\nmakespan saving: {:.1}%\n",
            self.cpu_saving_pct, self.makespan_saving_pct
        );
        out
    }
}

/// Metrics as CSV with a header row.
pub fn metrics_csv(rows: &[(&str, &SimMetrics)]) -> String {
    let mut out = String::from(
        "policy,events_total,unique_prs,executed_pipelines,modules_executed,tasks_killed_superseded,tasks_killed_reclaimed,peak_concurrent_running,makespan_s,max_task_sojourn_s\n",
    );
    for (name, m) in rows {
        out.push_str(&format!(
            "{name},{},{},{},{},{},{},{},{},{}\n",
            m.events_total,
            m.unique_prs,
            m.executed_pipelines,
            m.modules_executed,
            m.tasks_killed_superseded,
            m.tasks_killed_reclaimed,
            m.peak_concurrent_running,
            m.makespan_s,
            m.max_task_sojourn_s
        ));
    }
    out
}
