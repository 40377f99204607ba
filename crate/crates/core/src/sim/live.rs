//! Integration mode: replays a trace through the running engine, with every
//! planned module replaced by a real process that sleeps and exits.

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{SimError, SimMetrics, TraceEvent};
use crate::builder::Builder;
use crate::config::ServiceConfig;
use crate::inspector::{Inspector, PipelineOptions};
use crate::model::{ExitVerdict, PluginDescriptor, PluginGroup, PluginKind, TaskState};
use crate::modulator::{load_store, NoopCodeHost, PluginStore};
use crate::runtime::{Engine, EngineParts};
use crate::scheduler::SchedulerConfig;
use crate::source::ScratchWorkspaces;

use super::Policy;

/// Wall-clock scaling for integration replays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LiveOptions {
    /// Real seconds per simulated second of arrival time.
    pub time_scale: f64,
    /// Sleep of every module process, in real seconds.
    pub module_seconds: f64,
    /// Upper bound on the whole replay.
    pub timeout_s: f64,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self { time_scale: 0.001, module_seconds: 0.05, timeout_s: 600.0 }
    }
}

const MODULE_SCRIPT: &str = r#"#!/bin/sh
echo "$CI_HEAD_SHA $MODULE" >> "$STARTS"
sleep "$COST"
if [ -f "$FAILS/$CI_HEAD_SHA" ] && grep -qx "$MODULE" "$FAILS/$CI_HEAD_SHA"; then
  exit 1
fi
exit 0
"#;

fn io_err(e: std::io::Error) -> SimError {
    SimError::Store(e.to_string())
}

/// One stub script per planned module; returns the replacement store.
fn stub_store(dir: &Path, config: &ServiceConfig, opts: &LiveOptions) -> Result<PluginStore, SimError> {
    let store = load_store(Path::new("/nonexistent"), config).map_err(|e| SimError::Store(e.to_string()))?;
    let bin = dir.join("modules");
    fs::create_dir_all(&bin).map_err(io_err)?;
    let mut out = Vec::new();
    for group in [PluginGroup::PreBuild, PluginGroup::PostBuild] {
        for d in store.execution_plan(group) {
            let exec = bin.join(&d.name);
            let body = MODULE_SCRIPT
                .replace("$STARTS", &dir.join("starts.log").to_string_lossy())
                .replace("$FAILS", &dir.join("fails").to_string_lossy())
                .replace("$MODULE", &d.name)
                .replace("$COST", &format!("{:.3}", opts.module_seconds));
            fs::write(&exec, body).map_err(io_err)?;
            fs::set_permissions(&exec, fs::Permissions::from_mode(0o755)).map_err(io_err)?;
            out.push(PluginDescriptor { kind: PluginKind::External, exec_path: Some(exec), ..d });
        }
    }
    PluginStore::from_descriptors(out).map_err(|e| SimError::Store(e.to_string()))
}

/// Replays `trace` against a real engine. Makespan and sojourn are wall
/// seconds; modules_executed counts module processes that started.
pub fn replay_live(
    trace: &[TraceEvent],
    policy: Policy,
    config: &ServiceConfig,
    opts: &LiveOptions,
) -> Result<SimMetrics, SimError> {
    if trace.is_empty() {
        return Err(SimError::EmptyTrace);
    }
    let tmp = tempfile::Builder::new().prefix("lightci-sim-").tempdir().map_err(io_err)?;
    let dir = tmp.path().to_path_buf();
    let fails = dir.join("fails");
    fs::create_dir_all(&fails).map_err(io_err)?;
    for e in trace {
        if let Some(m) = &e.fail_module {
            fs::write(fails.join(e.event.head_commit.as_str()), format!("{m}\n")).map_err(io_err)?;
        }
    }
    let gated = policy == Policy::Gated;
    let inspector = Inspector {
        store: Arc::new(stub_store(&dir, config, opts)?),
        thresholds: config.thresholds.clone(),
        tools: BTreeMap::new(),
        builder: Arc::new(Builder::new(&dir.join("buildroots"), BTreeMap::new())),
        code_host: Arc::new(NoopCodeHost),
        aging: None,
        reports_dir: dir.join("reports"),
        kill_grace: Duration::from_secs(config.kill_grace_seconds),
        options: PipelineOptions { gate_postbuild: gated, post_parallelism: config.max_run_queue },
    };
    let mut sched = SchedulerConfig::new(config.max_run_queue);
    sched.supersession = gated;
    sched.history_limit = usize::MAX;
    let engine = Engine::start_with(EngineParts {
        scheduler: sched,
        provider: Arc::new(ScratchWorkspaces::new(&dir).map_err(io_err)?),
        inspector: Arc::new(inspector),
        journal_path: None,
        kill_grace: Duration::from_secs(config.kill_grace_seconds),
        memory_budget_bytes: None,
    })
    .map_err(|e| SimError::Scheduler(e.to_string()))?;

    let first = trace.iter().map(|e| e.event.received_at).min().unwrap_or(0);
    let t0 = Instant::now();
    for e in trace {
        let at = Duration::from_secs_f64((e.event.received_at - first) as f64 / 1e9 * opts.time_scale);
        if let Some(d) = at.checked_sub(t0.elapsed()) {
            std::thread::sleep(d);
        }
        engine.submit(e.event.clone()).map_err(|e| SimError::Scheduler(e.to_string()))?;
    }
    let done = engine.wait_for(Duration::from_secs_f64(opts.timeout_s), |s| s.counters.live == 0);
    let snap = engine.snapshot();
    engine.shutdown(Duration::from_secs(config.shutdown_grace_seconds));
    if !done {
        return Err(SimError::Scheduler(format!("replay did not finish within {} s", opts.timeout_s)));
    }

    let starts = fs::read_to_string(dir.join("starts.log")).unwrap_or_default();
    let submitted = snap.tasks.iter().map(|t| t.submitted_at).min().unwrap_or(0);
    let finished = snap.tasks.iter().filter_map(|t| t.finished_at).max().unwrap_or(submitted);
    Ok(SimMetrics {
        events_total: trace.len() as u64,
        unique_prs: trace.iter().map(|e| e.event.pr_number).collect::<std::collections::BTreeSet<_>>().len() as u64,
        executed_pipelines: snap
            .tasks
            .iter()
            .filter(|t| matches!(t.state, TaskState::Exit(ExitVerdict::Pass | ExitVerdict::Fail)))
            .count() as u64,
        modules_executed: starts.lines().count() as u64,
        tasks_killed_superseded: snap.kills.superseded,
        tasks_killed_reclaimed: snap.kills.reclaimed,
        peak_concurrent_running: snap.peak_running as u64,
        makespan_s: (finished - submitted) as f64 / 1e9,
        max_task_sojourn_s: snap
            .tasks
            .iter()
            .filter_map(|t| Some((t.finished_at? - t.submitted_at) as f64 / 1e9))
            .fold(0.0, f64::max),
    })
}

/// Both policies over one trace in integration mode. The per-slot curve is
/// left empty: replaying every slot with real processes is too slow to be
/// useful.
pub fn compare_live(
    spec: &super::WorkloadSpec,
    config: &ServiceConfig,
    opts: &LiveOptions,
) -> Result<super::Comparison, SimError> {
    let trace = super::generate_trace(spec, &super::prebuild_modules(config)?)?;
    let baseline = replay_live(&trace, Policy::Baseline, config, opts)?;
    let gated = replay_live(&trace, Policy::Gated, config, opts)?;
    Ok(super::Comparison::new(spec.seed, config.max_run_queue, baseline, gated, Vec::new()))
}
