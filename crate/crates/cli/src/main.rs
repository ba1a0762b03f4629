//! `fedrun`: validate, run, compare and serve federated experiments.
//!
//! Exit codes: 0 success, 1 comparison outside tolerance, 2 invalid input
//! (experiment, sites file, traces that cannot be compared), 3 runtime fault.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use fedlab_core::compare::{compare_traces, CompareError, Metric};
use fedlab_core::experiment::{parse_experiment, validate_layers, ExperimentDescription, SyncMode};
use fedlab_core::hub::store::TraceStore;
use fedlab_core::hub::{Hub, RunClock, RunState};
use fedlab_core::plant::oracle::{monolithic_oracle, OracleOptions};
use fedlab_core::registry::Registry;
use fedlab_core::sync::{execute, RunOptions, RunResult};
use fedlab_core::trace::{parse_csv, TraceRow};
use serde_json::json;

#[derive(Parser)]
#[command(name = "fedrun", version, about = "Federated co-simulation and HIL experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Conservative,
    BestEffort,
    WaveformRelaxation,
}

impl From<ModeArg> for SyncMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Conservative => SyncMode::Conservative,
            ModeArg::BestEffort => SyncMode::BestEffort,
            ModeArg::WaveformRelaxation => SyncMode::WaveformRelaxation,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Rms,
    Linf,
}

#[derive(Subcommand)]
enum Cmd {
    /// Check an experiment on all five layers.
    Validate {
        experiment: PathBuf,
        /// Print the report as JSON.
        #[arg(long)]
        json: bool,
        /// Sites file; defaults to `sites.json` next to the experiment.
        #[arg(long)]
        sites: Option<PathBuf>,
    },
    /// Run an experiment with all sites in this process.
    Run {
        experiment: PathBuf,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        seed: Option<u64>,
        /// Artifact directory; defaults to `runs/<experiment id>`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run even if validation reports errors.
        #[arg(long)]
        force: bool,
        #[arg(long)]
        sites: Option<PathBuf>,
    },
    /// Compare two trace CSVs sampled on the same grid.
    Compare {
        a: PathBuf,
        b: PathBuf,
        #[arg(long, value_enum, default_value = "linf")]
        metric: MetricArg,
        #[arg(long)]
        tol: f64,
        /// Only compare topics matching this glob.
        #[arg(long)]
        topic: Option<String>,
        #[arg(long)]
        json: bool,
    },
    /// Write the monolithic reference trace of an experiment.
    Oracle {
        experiment: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Integration substeps per macro step.
        #[arg(long, default_value_t = OracleOptions::default().substeps)]
        substeps: u64,
        #[arg(long)]
        sites: Option<PathBuf>,
    },
    /// Run the hub daemon.
    Serve {
        #[arg(long)]
        sites: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Also accept newline-delimited JSON envelopes on this address.
        #[arg(long)]
        ndjson: Option<SocketAddr>,
        /// Persist each run's trace as `<dir>/<run>.csv`.
        #[arg(long)]
        store: Option<PathBuf>,
        /// Built console assets served under `/console/`.
        #[arg(long)]
        console: Option<PathBuf>,
    },
}

/// A failure together with its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

fn invalid(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 2, error: error.into() }
}

fn fault(error: impl Into<anyhow::Error>) -> Failure {
    Failure { code: 3, error: error.into() }
}

type Outcome = Result<ExitCode, Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FEDRUN_LOG", "warn")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Cmd::Validate { experiment, json, sites } => validate(&experiment, json, sites),
        Cmd::Run { experiment, mode, seed, out, force, sites } => {
            run(&experiment, mode.map(Into::into), seed, out, force, sites)
        }
        Cmd::Compare { a, b, metric, tol, topic, json } => compare(&a, &b, metric, tol, topic.as_deref(), json),
        Cmd::Oracle { experiment, out, substeps, sites } => oracle(&experiment, out, substeps, sites),
        Cmd::Serve { sites, listen, ndjson, store, console } => serve(&sites, listen, ndjson, store, console),
    };
    match outcome {
        Ok(code) => code,
        Err(f) => {
            eprintln!("fedrun: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn sites_path(experiment: &Path, sites: Option<PathBuf>) -> PathBuf {
    sites.unwrap_or_else(|| experiment.parent().unwrap_or(Path::new(".")).join("sites.json"))
}

fn load(experiment: &Path, sites: Option<PathBuf>) -> Result<(ExperimentDescription, Registry), Failure> {
    let text = std::fs::read_to_string(experiment)
        .with_context(|| format!("reading {}", experiment.display()))
        .map_err(invalid)?;
    let exp = parse_experiment(&text).with_context(|| experiment.display().to_string()).map_err(invalid)?;
    let reg = Registry::load(&sites_path(experiment, sites)).map_err(invalid)?;
    Ok((exp, reg))
}

fn validate(experiment: &Path, as_json: bool, sites: Option<PathBuf>) -> Outcome {
    let (exp, reg) = load(experiment, sites)?;
    let report = validate_layers(&exp, &reg);
    if as_json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        print!("{}", report.to_text());
    }
    Ok(if report.is_valid() { ExitCode::SUCCESS } else { ExitCode::from(2) })
}

fn summary(exp: &ExperimentDescription, r: &RunResult, artifacts: &[String], forced: bool) -> serde_json::Value {
    json!({
        "run": r.run_id,
        "experiment": exp,
        "seed": exp.seed,
        "mode": r.mode,
        "state": r.state,
        "forced": forced,
        "trace_sha256": r.trace_hash(),
        "artifacts": artifacts,
        "warnings": r.warnings,
        "causality_violations": r.violations(exp.macro_step_ns).len(),
        "median_staleness_ns": r.median_staleness_ns(),
        "stage_history": r.stage_history,
        "deadline_misses": r.deadline.as_ref().map(|d| d.misses()),
        "deliveries": r.deliveries.iter().map(|((from, to), n)| json!({"from": from, "to": to, "count": n})).collect::<Vec<_>>(),
    })
}

fn run(
    experiment: &Path,
    mode: Option<SyncMode>,
    seed: Option<u64>,
    out: Option<PathBuf>,
    force: bool,
    sites: Option<PathBuf>,
) -> Outcome {
    let (mut exp, reg) = load(experiment, sites)?;
    if let Some(m) = mode {
        exp.sync = m;
    }
    if let Some(s) = seed {
        exp.seed = s;
    }
    let report = validate_layers(&exp, &reg);
    if !report.is_valid() {
        eprint!("{}", report.to_text());
        if !force {
            return Err(invalid(anyhow!("experiment has validation errors (use --force to run anyway)")));
        }
        log::warn!("running despite validation errors");
    }
    let hub = Hub::new(reg);
    let clock = if exp.sync == SyncMode::BestEffort { RunClock::Wall } else { RunClock::Logical };
    let run = hub.create_run(exp.clone(), clock).map_err(fault)?;
    let result = execute(&hub, &run, &RunOptions::default()).map_err(fault)?;
    let dir = out.unwrap_or_else(|| PathBuf::from("runs").join(&exp.id));
    let mut artifacts = result.write_artifacts(&dir).with_context(|| dir.display().to_string()).map_err(fault)?;
    artifacts.push("summary.json".into());
    let text = serde_json::to_string_pretty(&summary(&exp, &result, &artifacts, force)).expect("summary serializes");
    std::fs::write(dir.join("summary.json"), text).map_err(fault)?;
    for w in &result.warnings {
        eprintln!("warning: {w}");
    }
    println!("{} {:?} -> {} (trace sha256 {})", result.run_id, result.state, dir.display(), result.trace_hash());
    match result.state {
        RunState::Completed => Ok(ExitCode::SUCCESS),
        other => Err(fault(anyhow!("run ended {other:?}"))),
    }
}

fn read_trace(path: &Path) -> Result<Vec<TraceRow>, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display())).map_err(invalid)?;
    parse_csv(&text).map_err(|e| invalid(anyhow!("{}: {}", path.display(), e.0)))
}

fn compare(a: &Path, b: &Path, metric: MetricArg, tol: f64, topic: Option<&str>, as_json: bool) -> Outcome {
    let (mut ra, mut rb) = (read_trace(a)?, read_trace(b)?);
    if let Some(g) = topic {
        let pattern = glob::Pattern::new(g).map_err(|e| invalid(anyhow!("topic glob `{g}`: {e}")))?;
        ra.retain(|r| pattern.matches(&r.sample.topic));
        rb.retain(|r| pattern.matches(&r.sample.topic));
    }
    let metric = match metric {
        MetricArg::Rms => Metric::Rms,
        MetricArg::Linf => Metric::Linf,
    };
    let c = compare_traces(&ra, &rb, None).map_err(|e| match e {
        CompareError::GridMismatch { .. } | CompareError::NoCommonTopics => invalid(e),
    })?;
    let value = c.metric(metric);
    let pass = value <= tol;
    if as_json {
        let doc =
            json!({"rms": c.rms(), "linf": c.linf(), "metric": metric, "tol": tol, "pass": pass, "topics": c.topics});
        println!("{}", serde_json::to_string_pretty(&doc).expect("json"));
    } else {
        println!("{:<28} {:>8} {:>14} {:>14}", "topic", "points", "rms", "linf");
        for t in &c.topics {
            println!("{:<28} {:>8} {:>14.6e} {:>14.6e}", t.topic, t.points, t.rms, t.linf);
        }
        println!("rms {:.6e}  linf {:.6e}  -> {} (tol {tol:e})", c.rms(), c.linf(), if pass { "pass" } else { "FAIL" });
    }
    Ok(if pass { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn oracle(experiment: &Path, out: Option<PathBuf>, substeps: u64, sites: Option<PathBuf>) -> Outcome {
    let (exp, reg) = load(experiment, sites)?;
    let trace = monolithic_oracle(&exp, &reg.model, OracleOptions { substeps }).map_err(invalid)?;
    match out {
        Some(path) => {
            std::fs::write(&path, trace.to_csv()).with_context(|| path.display().to_string()).map_err(fault)?
        }
        None => print!("{}", trace.to_csv()),
    }
    Ok(ExitCode::SUCCESS)
}

fn serve(
    sites: &Path,
    listen: SocketAddr,
    ndjson: Option<SocketAddr>,
    store: Option<PathBuf>,
    console: Option<PathBuf>,
) -> Outcome {
    let reg = Registry::load(sites).map_err(invalid)?;
    let store = store.map_or_else(TraceStore::new, TraceStore::with_persistence);
    let hub = Hub::with_store(reg, store);
    let rt = tokio::runtime::Runtime::new().map_err(fault)?;
    rt.block_on(async move {
        let http = fedlab_server::bind(listen).await.map_err(|e| fault(anyhow!(e)))?;
        let ndjson = match ndjson {
            Some(addr) => Some(fedlab_server::bind(addr).await.map_err(|e| fault(anyhow!(e)))?),
            None => None,
        };
        eprintln!("fedrun: hub listening on http://{}", http.local_addr().map_err(fault)?);
        let opts = fedlab_server::ServeOptions { console_dir: console, ndjson };
        fedlab_server::serve(hub, http, opts, shutdown_signal()).await.map_err(fault)?;
        Ok(ExitCode::SUCCESS)
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
    log::info!("shutting down");
}
