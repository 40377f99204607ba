//! `lightci sim` subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Subcommand};
use lightci_core::config::{load_config, ServiceConfig};
use lightci_core::sim::{
    compare, compare_live, cost_model, default_spec, generate_trace, metrics_csv, prebuild_modules, replay,
    replay_live, LiveOptions, Policy, WorkloadSpec,
};

#[derive(Debug, Subcommand)]
pub enum SimCommand {
    /// Write the synthetic event trace of a workload.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Replay the workload under one policy and write its metrics.
    Replay {
        #[command(flatten)]
        common: Common,
        /// baseline or gated
        #[arg(long)]
        policy: Policy,
        /// Also write the metrics as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Replay under both policies and write the comparison report.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Also write the makespan-vs-arrivals curve as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct Common {
    /// Workload spec (JSON). Defaults to the built-in synthetic day.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Service config supplying max_run_queue and the module plan.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output file.
    #[arg(long)]
    out: PathBuf,
    /// Integration mode only: real seconds per simulated second.
    #[arg(long, default_value_t = LiveOptions::default().time_scale)]
    time_scale: f64,
    /// Integration mode only: sleep of each module process in seconds.
    #[arg(long, default_value_t = LiveOptions::default().module_seconds)]
    module_seconds: f64,
}

impl Common {
    fn load(&self) -> anyhow::Result<(WorkloadSpec, ServiceConfig, LiveOptions)> {
        let spec = match &self.spec {
            Some(p) => WorkloadSpec::load(p).with_context(|| format!("workload spec {}", p.display()))?,
            None => default_spec(),
        };
        let config = match &self.config {
            Some(p) => load_config(p).with_context(|| format!("config {}", p.display()))?,
            None => ServiceConfig::default(),
        };
        let live =
            LiveOptions { time_scale: self.time_scale, module_seconds: self.module_seconds, ..Default::default() };
        Ok((spec, config, live))
    }
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

pub fn run(cmd: SimCommand) -> anyhow::Result<()> {
    match cmd {
        SimCommand::Generate { common } => {
            let (spec, config, _) = common.load()?;
            let trace = generate_trace(&spec, &prebuild_modules(&config)?)?;
            write(&common.out, &serde_json::to_string_pretty(&trace)?)?;
            println!("{} events written to {}", trace.len(), common.out.display());
        }
        SimCommand::Replay { common, policy, csv } => {
            let (spec, config, live) = common.load()?;
            let trace = generate_trace(&spec, &prebuild_modules(&config)?)?;
            let metrics = if spec.module_cost_model.is_some() {
                replay(&trace, policy, &config, cost_model(&spec)?)?
            } else {
                replay_live(&trace, policy, &config, &live)?
            };
            write(&common.out, &serde_json::to_string_pretty(&metrics)?)?;
            if let Some(csv) = csv {
                let name = format!("{policy:?}").to_lowercase();
                write(&csv, &metrics_csv(&[(&name, &metrics)]))?;
            }
            println!("{}", serde_json::to_string_pretty(&metrics)?);
        }
        SimCommand::Compare { common, csv } => {
            let (spec, config, live) = common.load()?;
            let report = if spec.module_cost_model.is_some() {
                compare(&spec, &config)?
            } else {
                compare_live(&spec, &config, &live)?
            };
            write(&common.out, &serde_json::to_string_pretty(&report)?)?;
            if let Some(csv) = csv {
                write(&csv, &report.curve_csv())?;
            }
            print!("{}", report.table());
        }
    }
    Ok(())
}
