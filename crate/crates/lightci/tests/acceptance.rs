//! Acceptance criteria 1 to 10. Runs without the libtest harness and prints
//! one PASS/FAIL line per criterion. An optional argument selects criteria
//! whose number or name contains it.

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Barrier};
use std::thread;
use std::time::{Duration, Instant};

use common::*;
use lightci_core::builder::Builder;
use lightci_core::checks::corpus::{discover, required_rules, FixtureCase};
use lightci_core::clock::ManualClock;
use lightci_core::config::{RepositoryConfig, ServiceConfig, StubBuildConfig};
use lightci_core::inspector::{Inspector, PipelineOptions};
use lightci_core::journal::{replay_check, MemoryJournal};
use lightci_core::model::{
    CheckResult, CheckStatus, CommitId, ExitVerdict, PipelineResult, PipelineVerdict, PluginDescriptor, PluginGroup,
    PluginKind, PrAction, PrEvent, PrTask, TaskState, Tier,
};
use lightci_core::modulator::{builtin_table, NoopCodeHost, PluginStore};
use lightci_core::process::{process_alive, NoHooks, Pid};
use lightci_core::scheduler::{Scheduler, SchedulerConfig};
use lightci_core::sim::{compare, default_cost_model, Slot, WorkloadSpec};
use lightci_core::source::{dir_size, run_git, SourceManager};
use lightci_core::testing::CommitSpec;
use rand::{Rng, SeedableRng};
use serde_json::json;

type Outcome = Result<String, String>;
type Criterion = (u32, &'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($msg)+));
        }
    };
}

fn within(limit_s: f64, t0: Instant) -> Result<f64, String> {
    let s = t0.elapsed().as_secs_f64();
    ensure!(s < limit_s, "took {s:.1}s, limit {limit_s}s");
    Ok(s)
}

// ---------------------------------------------------------------- helpers

struct Bench {
    dir: tempfile::TempDir,
}

impl Bench {
    fn new() -> Self {
        let b = Self { dir: tempfile::tempdir().unwrap() };
        fs::create_dir_all(b.workspace()).unwrap();
        b
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn workspace(&self) -> PathBuf {
        self.path("ws")
    }

    fn external(&self, name: &str, group: PluginGroup, idx: u32, body: &str, timeout: u64) -> PluginDescriptor {
        let exec = self.path(&format!("plugins/{name}"));
        fs::create_dir_all(exec.parent().unwrap()).unwrap();
        fs::write(&exec, format!("#!/bin/sh\n{body}\n")).unwrap();
        fs::set_permissions(&exec, fs::Permissions::from_mode(0o755)).unwrap();
        PluginDescriptor {
            name: name.into(),
            tier: Tier::Base,
            group,
            kind: PluginKind::External,
            exec_path: Some(exec),
            timeout_seconds: timeout,
            enabled: true,
            order_index: idx,
        }
    }

    fn inspector(&self, plugins: Vec<PluginDescriptor>, stubs: BTreeMap<String, StubBuildConfig>) -> Inspector {
        Inspector {
            store: Arc::new(PluginStore::from_descriptors(plugins).unwrap()),
            thresholds: Default::default(),
            tools: BTreeMap::new(),
            builder: Arc::new(Builder::new(&self.path("buildroots"), stubs)),
            code_host: Arc::new(NoopCodeHost),
            aging: None,
            reports_dir: self.path("reports"),
            kill_grace: Duration::from_secs(5),
            options: PipelineOptions { gate_postbuild: true, post_parallelism: 4 },
        }
    }
}

fn event(pr: u64, action: PrAction, head: CommitId) -> PrEvent {
    PrEvent {
        repo_id: REPO.into(),
        pr_number: pr,
        action,
        head_commit: head,
        source_branch: format!("pr-{pr}"),
        target_branch: "main".into(),
        clone_url: String::new(),
        delivery_id: String::new(),
        received_at: 0,
    }
}

fn task(id: u64, pr: u64) -> PrTask {
    PrTask::from_event(id, 1, &event(pr, PrAction::Opened, CommitId::parse(&sha(id)).unwrap()), 0)
}

fn read_pid(path: &Path) -> Result<Pid, String> {
    for _ in 0..300 {
        if let Some(p) = fs::read_to_string(path).ok().and_then(|s| s.trim().parse().ok()) {
            return Ok(p);
        }
        thread::sleep(Duration::from_millis(10));
    }
    Err(format!("{} never written", path.display()))
}

// ---------------------------------------------------------------- criteria

/// Duplicate-work elimination on the virtual clock.
fn c1_duplicate_elimination() -> Outcome {
    let t0 = Instant::now();
    let spec = WorkloadSpec {
        seed: 42,
        slots: [10, 20, 30, 40].iter().map(|&a| Slot { duration_s: 1800.0, arrivals: a }).collect(),
        duplication_fraction: 0.4,
        prebuild_fail_fraction: 0.0,
        module_cost_model: Some(default_cost_model()),
    };
    let report = compare(&spec, &ServiceConfig::default()).map_err(|e| e.to_string())?;
    let (b, g) = (report.baseline.modules_executed as f64, report.gated.modules_executed as f64);
    let target = 0.6 * b;
    ensure!((g - target).abs() <= 1.0, "gated {g} vs 60% of baseline {target}");
    ensure!(g <= target + 1.0, "gated {g} above 60% of baseline {b}");
    let s = within(10.0, t0)?;
    Ok(format!("baseline {b}, gated {g} ({:.1}% of baseline), {s:.2}s", 100.0 * g / b))
}

/// Bounded concurrency with 100 simultaneous webhooks.
fn c2_bounded_concurrency() -> Outcome {
    let t0 = Instant::now();
    let (n, r, timeout_s) = (100u64, 4usize, 5u64);
    let setup = Setup::stub_pipeline(1.0, timeout_s);
    let mut config = setup.config();
    config["max_run_queue"] = json!(r);
    let daemon = Daemon::start(&config, &setup.path("config.json"));
    let head = setup.head.as_str().to_owned();

    let barrier = Arc::new(Barrier::new(n as usize));
    let posters: Vec<_> = (1..=n)
        .map(|pr| {
            let (barrier, addr, head) = (barrier.clone(), daemon.addr.clone(), head.clone());
            thread::spawn(move || {
                barrier.wait();
                let payload = lightci_core::webhook::pull_request_payload(REPO, "x", pr, "opened", &head, "f", "main");
                let body = serde_json::to_vec(&payload).unwrap();
                let resp = agent()
                    .post(&format!("http://{addr}/webhook"))
                    .header("X-Event-Kind", "pull_request")
                    .header("X-Delivery-Id", &format!("c2-{pr}"))
                    .header("X-Signature-256", lightci_core::webhook::sign(SECRET.as_bytes(), &body))
                    .send(&body[..])
                    .unwrap();
                resp.status().as_u16()
            })
        })
        .collect();
    let mut accepted_at = None;
    let mut samples = 0usize;
    let mut posters = Some(posters);
    loop {
        let s = daemon.status();
        samples += 1;
        ensure!(s.run_queue.len() <= r, "run queue {} > {r}", s.run_queue.len());
        ensure!(s.peak_running <= r, "peak {} > {r}", s.peak_running);
        if accepted_at.is_some() {
            ensure!(s.peak_running == r, "peak {} != {r} after all submissions", s.peak_running);
        }
        if let Some(ps) = posters.take_if(|ps| ps.iter().all(|p| p.is_finished())) {
            for p in ps {
                let code = p.join().unwrap();
                ensure!(code == 202, "webhook answered {code}");
            }
            accepted_at = Some(Instant::now());
        }
        if accepted_at.is_some() && s.counters.live == 0 {
            break;
        }
        ensure!(t0.elapsed() < Duration::from_secs(60), "did not drain within 60s: {:?}", s.counters);
        thread::sleep(Duration::from_millis(25));
    }
    let snap = daemon.status();
    ensure!(snap.counters.passed == n, "passed {} of {n}", snap.counters.passed);
    let bound = n.div_ceil(r as u64) * timeout_s;
    let worst =
        snap.tasks.iter().filter_map(|t| Some((t.finished_at? - t.submitted_at) as f64 / 1e9)).fold(0.0, f64::max);
    ensure!(worst <= bound as f64, "sojourn {worst:.1}s exceeds bound {bound}s");
    let s = within(60.0, t0)?;
    Ok(format!("{samples} samples, peak {}, worst sojourn {worst:.1}s (bound {bound}s), {s:.1}s", snap.peak_running))
}

/// Post-build runs only when all five blocking pre-build stubs pass.
fn c3_prebuild_gating() -> Outcome {
    let t0 = Instant::now();
    let bench = Bench::new();
    let marker = bench.path("post-ran");
    let mut post_runs = 0;
    for combo in 0u32..32 {
        let _ = fs::remove_file(&marker);
        let mut plugins: Vec<_> = (0..5)
            .map(|i| {
                bench.external(
                    &format!("pre{i}"),
                    PluginGroup::PreBuild,
                    i + 1,
                    &format!("exit {}", (combo >> i) & 1),
                    10,
                )
            })
            .collect();
        plugins.push(bench.external("post", PluginGroup::PostBuild, 17, &format!("touch {}", marker.display()), 10));
        let r = bench
            .inspector(plugins, BTreeMap::new())
            .run_pipeline(&task(combo as u64 + 1, 1), &bench.workspace(), &NoHooks)
            .map_err(|e| e.to_string())?;
        if marker.exists() {
            post_runs += 1;
            ensure!(combo == 0, "post-build ran for combination {combo:05b}");
        }
        if combo == 0 {
            ensure!(r.verdict == PipelineVerdict::Success, "all-pass verdict {:?}", r.verdict);
        } else {
            ensure!(r.verdict == PipelineVerdict::PrebuildFailed, "combination {combo:05b}: {:?}", r.verdict);
            ensure!(r.postbuild_results.is_empty(), "combination {combo:05b} has post-build results");
        }
    }
    ensure!(post_runs == 1, "post-build ran {post_runs} times");
    let s = within(30.0, t0)?;
    Ok(format!("post-build ran in 1 of 32 combinations, {s:.1}s"))
}

/// Random scheduler traces always journal legal transitions and terminate.
fn c4_state_machine() -> Outcome {
    let t0 = Instant::now();
    let mut transitions = 0usize;
    for seed in 0..1000u64 {
        let mut rng = rand::rngs::StdRng::seed_from_u64(seed);
        let journal = MemoryJournal::default();
        let mut cfg = SchedulerConfig::new(rng.gen_range(1..=4));
        cfg.wait_capacity = if rng.gen_bool(0.3) { Some(rng.gen_range(1..=6)) } else { None };
        let mut sched = Scheduler::new(cfg, Arc::new(ManualClock::new()));
        sched.add_observer(Box::new(journal.clone()));
        let mut next_sha = 1u64;
        for _ in 0..rng.gen_range(5..60) {
            let running = sched.run_queue();
            let pick = |rng: &mut rand::rngs::StdRng| running[rng.gen_range(0..running.len())];
            match rng.gen_range(0..7) {
                0 | 1 => {
                    let pr = rng.gen_range(1..=5);
                    let action = if rng.gen_bool(0.5) { PrAction::Opened } else { PrAction::Synchronized };
                    next_sha += 1;
                    let t = sched.create_task(&event(pr, action, CommitId::parse(&sha(next_sha)).unwrap()));
                    let _ = sched.submit(t);
                }
                2 => {
                    sched.cancel(REPO, rng.gen_range(1..=5));
                }
                3 if !running.is_empty() => {
                    let id = pick(&mut rng);
                    let verdict =
                        if rng.gen_bool(0.7) { PipelineVerdict::Success } else { PipelineVerdict::PrebuildFailed };
                    let status =
                        if verdict == PipelineVerdict::Success { CheckStatus::Pass } else { CheckStatus::Fail };
                    let result = PipelineResult::new(id, vec![CheckResult::new("m", status, 1, "")], vec![], verdict);
                    if sched.task(id).map(|t| t.state) == Some(TaskState::Wait) {
                        let _ = sched.resume(id);
                    }
                    let _ = sched.on_task_finished(id, result);
                }
                4 => {
                    sched.reclaim_oldest();
                }
                5 if !running.is_empty() => {
                    let id = pick(&mut rng);
                    let _ = if rng.gen_bool(0.5) { sched.enter_wait(id) } else { sched.resume(id) };
                }
                6 if !running.is_empty() => {
                    let _ = sched.on_task_errored(pick(&mut rng), "workspace failure");
                }
                _ => {}
            }
            sched.admit_all();
        }
        // drain: finish whatever is admitted until nothing is live
        for _ in 0..10_000 {
            sched.admit_all();
            let running = sched.run_queue();
            if running.is_empty() {
                break;
            }
            for id in running {
                if sched.task(id).map(|t| t.state) == Some(TaskState::Wait) {
                    sched.resume(id).map_err(|e| e.to_string())?;
                }
                let result = PipelineResult::new(id, vec![], vec![], PipelineVerdict::Success);
                sched.on_task_finished(id, result).map_err(|e| e.to_string())?;
            }
        }
        let records = journal.records();
        transitions += records.len();
        let finals = replay_check(&records).map_err(|v| format!("seed {seed}: {v:?}"))?;
        ensure!(finals.values().all(|s| s.is_terminal()), "seed {seed}: a task never terminated");
        ensure!(sched.counters().conserved(), "seed {seed}: counters not conserved");
    }
    let s = within(60.0, t0)?;
    Ok(format!("1000 traces, {transitions} journaled transitions, {s:.1}s"))
}

/// Three resubmissions while generation 1 runs.
fn c5_supersession() -> Outcome {
    let script = "echo $$ >> \"$PID_LOG\"\n\
                  if [ -e \"$CI_WORKSPACE/FAST\" ]; then d=0.3; else d=60; fi\n\
                  sleep $d &\n\
                  echo $! >> \"$PID_LOG\"\n\
                  wait";
    let setup = Setup::with_script(script, 120);
    let mut shas = vec![];
    setup.repo.checkout("feature", true);
    for i in 0..3 {
        setup.repo.write("change.txt", format!("{i}\n").as_bytes());
        shas.push(setup.repo.commit_all(&CommitSpec::default()));
    }
    setup.repo.write("FAST", b"");
    shas.push(setup.repo.commit_all(&CommitSpec::default()));
    let daemon = Daemon::start(&setup.config(), &setup.path("config.json"));

    let r = post_webhook(&daemon, 21, "opened", shas[0].as_str(), "g1");
    ensure!(r.status == 202, "opened: {}", r.status);
    let deadline = Instant::now() + Duration::from_secs(20);
    while setup.pids().len() < 2 {
        ensure!(Instant::now() < deadline, "generation 1 never started");
        thread::sleep(Duration::from_millis(25));
    }
    for (i, s) in shas[1..].iter().enumerate() {
        let r = post_webhook(&daemon, 21, "synchronize", s.as_str(), &format!("g{}", i + 2));
        ensure!(r.status == 202, "synchronize: {}", r.status);
        thread::sleep(Duration::from_millis(150));
    }
    ensure!(daemon.wait_for(Duration::from_secs(30), |s| s.counters.live == 0), "tasks did not settle");
    let snap = daemon.status();
    let mut tasks: Vec<_> = snap.tasks.iter().filter(|t| t.pr_number == 21).collect();
    tasks.sort_by_key(|t| t.generation);
    ensure!(tasks.len() == 4, "{} tasks", tasks.len());
    let completed: Vec<_> =
        tasks.iter().filter(|t| t.verdict.is_some() && t.state != TaskState::Exit(ExitVerdict::Killed)).collect();
    ensure!(
        completed.len() == 1 && completed[0].generation == 4,
        "completed generations {:?}",
        completed.iter().map(|t| t.generation).collect::<Vec<_>>()
    );
    ensure!(tasks[3].state == TaskState::Exit(ExitVerdict::Pass), "generation 4 ended {}", tasks[3].state);
    for t in &tasks[..3] {
        ensure!(t.state == TaskState::Exit(ExitVerdict::Killed), "generation {} ended {}", t.generation, t.state);
    }
    let pids = setup.pids();
    ensure!(all_gone(&pids, Duration::from_secs(6)), "plugin processes survived: {pids:?}");
    let deadline = Instant::now() + Duration::from_secs(6);
    let mut left = descendants(daemon.pid());
    while !left.is_empty() && Instant::now() < deadline {
        thread::sleep(Duration::from_millis(50));
        left = descendants(daemon.pid());
    }
    ensure!(left.is_empty(), "daemon still has descendants {left:?}");
    Ok(format!("generations 1-3 killed, generation 4 passed, {} plugin pids reaped", pids.len()))
}

/// Ten tasks over three PRs share one clone.
fn c6_single_clone() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let fx = lightci_core::testing::FixtureRepo::init(&tmp.path().join("origin"));
    let mut rng = rand::rngs::StdRng::seed_from_u64(5);
    for i in 0..30 {
        let blob: Vec<u8> = (0..40_000).map(|_| rng.gen()).collect();
        fx.write("data.bin", &blob);
        fx.commit_all(&CommitSpec { author_time: 1_600_000_000 + i, ..Default::default() });
    }
    let head = fx.head();
    let repo = RepositoryConfig { repo_id: REPO.into(), clone_url: fx.url(), default_branch: "main".into() };
    let reference = tmp.path().join("reference.git");
    run_git(tmp.path(), &["clone", "--mirror", "--quiet", &fx.url(), &reference.to_string_lossy()])?;
    let clone_bytes = dir_size(&reference);
    let checkout_bytes = dir_size(&fx.path) - dir_size(&fx.path.join(".git"));
    let overhead = checkout_bytes + 16 * 1024;

    let sm =
        SourceManager::new(&tmp.path().join("state"), &[repo], Duration::from_secs(10)).map_err(|e| e.to_string())?;
    for id in 1..=10u64 {
        let t = PrTask::from_event(id, 1, &event(id % 3 + 1, PrAction::Opened, head.clone()), 0);
        sm.derive_workspace(&t, &|_| {}).map_err(|e| e.to_string())?;
    }
    let clones = fs::read_dir(sm.clones_dir()).unwrap().flatten().filter(|e| e.path().is_dir()).count();
    ensure!(clones == 1, "{clones} base clone directories");
    let total = dir_size(&sm.clones_dir()) + dir_size(&sm.workspaces_dir());
    let bound = clone_bytes + 10 * overhead;
    ensure!(total < bound, "workspace bytes {total} >= bound {bound}");
    Ok(format!("1 clone, {total} bytes on disk vs bound {bound} (clone {clone_bytes})"))
}

/// Built-in check corpus is complete and green.
fn c7_check_corpus() -> Outcome {
    let t0 = Instant::now();
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/checks");
    let cases = discover(&root);
    ensure!(!cases.is_empty(), "no fixtures under {}", root.display());
    let mut seen: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for path in &cases {
        let case = FixtureCase::load(path)?;
        let ws = tempfile::tempdir().unwrap();
        let result = case.run(path.parent().unwrap(), ws.path())?;
        ensure!(result.status == case.expect, "{}: got {:?}", path.display(), result.status);
        let e = seen.entry(case.rule.clone()).or_default();
        match case.expect {
            CheckStatus::Pass => e.0 += 1,
            CheckStatus::Fail => e.1 += 1,
            _ => {}
        }
    }
    for rule in required_rules() {
        let (p, f) = seen.get(rule).copied().unwrap_or_default();
        ensure!(p >= 1 && f >= 1, "rule {rule}: {p} pass, {f} fail fixtures");
    }
    let s = within(10.0, t0)?;
    Ok(format!("{} fixtures over {} rules, {s:.2}s", cases.len(), required_rules().len()))
}

/// A plugin with a grandchild overruns its timeout.
fn c8_timeout_supervision() -> Outcome {
    let bench = Bench::new();
    let timeout = 1u64;
    let d = bench.path("pids");
    fs::create_dir_all(&d).unwrap();
    let body = format!(
        "echo $$ > {d}/parent\nsh -c 'sleep {s} & echo $! > {d}/grandchild; wait' &\necho $! > {d}/child\nsleep {s}",
        d = d.display(),
        s = 3 * timeout
    );
    let plugin = bench.external("slow", PluginGroup::PreBuild, 1, &body, timeout);
    let insp = bench.inspector(vec![plugin], BTreeMap::new());
    let start = Instant::now();
    let r = insp.run_pipeline(&task(1, 1), &bench.workspace(), &NoHooks).map_err(|e| e.to_string())?;
    ensure!(r.prebuild_results[0].status == CheckStatus::TimedOut, "status {:?}", r.prebuild_results[0].status);
    let pids: Vec<Pid> =
        ["parent", "child", "grandchild"].iter().map(|n| read_pid(&d.join(n))).collect::<Result<_, _>>()?;
    let fired = start + Duration::from_secs(timeout);
    let limit = fired + Duration::from_secs(6);
    while pids.iter().any(|p| process_alive(*p)) {
        ensure!(
            Instant::now() < limit,
            "still alive 6s after timeout: {:?}",
            pids.iter().filter(|p| process_alive(**p)).collect::<Vec<_>>()
        );
        thread::sleep(Duration::from_millis(20));
    }
    let gone_after = Instant::now().saturating_duration_since(fired).as_secs_f64();
    Ok(format!("TimedOut; parent, child and grandchild gone {gone_after:.2}s after the timeout"))
}

/// Four stub builds of cost c run in parallel.
fn c9_parallel_postbuild() -> Outcome {
    let t0 = Instant::now();
    let bench = Bench::new();
    let c = 2.0;
    let names = ["tizen", "android", "ubuntu", "yocto"];
    let stubs =
        names.iter().map(|n| (n.to_string(), StubBuildConfig { cost_seconds: c, success_probability: 1.0 })).collect();
    let plugins = builtin_table()
        .into_iter()
        .filter(|(_, n, _)| names.contains(n))
        .map(|(idx, n, group)| PluginDescriptor {
            name: n.into(),
            tier: Tier::Base,
            group,
            kind: PluginKind::Builtin,
            exec_path: None,
            timeout_seconds: 60,
            enabled: true,
            order_index: idx,
        })
        .collect();
    let insp = bench.inspector(plugins, stubs);
    let start = Instant::now();
    let r = insp.run_pipeline(&task(1, 1), &bench.workspace(), &NoHooks).map_err(|e| e.to_string())?;
    let wall = start.elapsed().as_secs_f64();
    ensure!(r.verdict == PipelineVerdict::Success, "verdict {:?}", r.verdict);
    ensure!(r.postbuild_results.len() == 4, "{} post-build results", r.postbuild_results.len());
    ensure!(wall <= 1.25 * c, "post-build wall clock {wall:.2}s > {:.2}s", 1.25 * c);
    let s = within(30.0, t0)?;
    Ok(format!("post-build {wall:.2}s for c={c}s (serial would be {}s), {s:.1}s", 4.0 * c))
}

/// Daemon RSS after 20 PRs.
fn c10_footprint() -> Outcome {
    let setup = Setup::stub_pipeline(0.2, 10);
    let daemon = Daemon::start(&setup.config(), &setup.path("config.json"));
    for pr in 1..=20u64 {
        let r = post_webhook(&daemon, pr, "opened", setup.head.as_str(), &format!("f{pr}"));
        ensure!(r.status == 202, "webhook {pr}: {}", r.status);
    }
    ensure!(
        daemon.wait_for(Duration::from_secs(60), |s| s.counters.live == 0 && s.counters.enqueued == 20),
        "20 PRs did not finish"
    );
    let passed = daemon.status().counters.passed;
    ensure!(passed == 20, "{passed} of 20 passed");
    let rss = rss_bytes(daemon.pid());
    let mb = rss as f64 / (1024.0 * 1024.0);
    ensure!(mb < 256.0, "resident memory {mb:.1} MB");
    Ok(format!("daemon VmRSS {mb:.1} MB after 20 PRs (bound 256 MB)"))
}

fn main() {
    let criteria: [Criterion; 10] = [
        (1, "duplicate-work elimination", c1_duplicate_elimination),
        (2, "bounded concurrency", c2_bounded_concurrency),
        (3, "pre-build gating", c3_prebuild_gating),
        (4, "state-machine soundness", c4_state_machine),
        (5, "supersession", c5_supersession),
        (6, "single clone", c6_single_clone),
        (7, "check corpus", c7_check_corpus),
        (8, "timeout supervision", c8_timeout_supervision),
        (9, "parallel post-build", c9_parallel_postbuild),
        (10, "footprint", c10_footprint),
    ];
    let filter = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    let mut ran = 0;
    for (n, name, f) in criteria {
        if let Some(fl) = &filter {
            if n.to_string() != *fl && !name.contains(fl.as_str()) {
                continue;
            }
        }
        ran += 1;
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} of {ran} criteria passed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
