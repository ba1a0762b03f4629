//! Co-simulation master: drives the participants of a run in one of three
//! synchronization modes and collects the run artifacts.

mod best_effort;
pub mod causality;
mod conservative;
mod wr;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::experiment::{validate_layers, ExperimentDescription, ParticipantDescriptor, StageError, SyncMode};
use crate::hub::remote::RemoteParticipant;
use crate::hub::{Hub, HubError, RunClock, RunHandle, RunState};
use crate::model::Nanos;
use crate::plant::{build_participant, DeadlineReport, Participant, PlantError};
use crate::trace::sha256_hex;

pub use causality::{causality_check, Arrival, Consumption, Violation};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SyncError {
    #[error("experiment is invalid:\n{0}")]
    Invalid(String),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error(transparent)]
    Hub(#[from] HubError),
    #[error("stage machine: {0}")]
    Stage(#[from] StageError),
    #[error("I/O: {0}")]
    Io(String),
    #[error("ParticipantTimeout: `{participant}`: {detail}")]
    ParticipantTimeout { participant: String, detail: String },
    #[error("ParticipantFault: `{participant}`: {detail}")]
    ParticipantFault { participant: String, detail: String },
}

/// Attributes a step failure to the participant that raised it.
pub(crate) fn step_error(participant: &str, e: PlantError) -> SyncError {
    let participant = participant.to_string();
    match e {
        PlantError::Timeout(detail) => SyncError::ParticipantTimeout { participant, detail },
        other => SyncError::ParticipantFault { participant, detail: other.to_string() },
    }
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Overrides the experiment's own mode.
    pub mode: Option<SyncMode>,
    /// How long to wait for a remote participant before failing the run.
    pub watchdog: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { mode: None, watchdog: Duration::from_secs(30) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrantRow {
    pub barrier_round: u64,
    pub granted_until_ns: Nanos,
    pub wall_time_ns: Nanos,
}

/// Age of the value a consumer used at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StalenessRecord {
    pub consumer: String,
    pub topic: String,
    pub used_at: Nanos,
    pub produced_at: Nanos,
}

impl StalenessRecord {
    pub fn staleness_ns(&self) -> Nanos {
        self.used_at.saturating_sub(self.produced_at)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WrLogRow {
    pub window_index: u64,
    pub iteration: u32,
    pub residual: f64,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub run_id: String,
    pub mode: SyncMode,
    pub state: RunState,
    pub trace_csv: String,
    pub grants: Vec<GrantRow>,
    pub consumptions: Vec<Consumption>,
    pub arrivals: Vec<Arrival>,
    pub staleness: Vec<StalenessRecord>,
    pub wr_log: Vec<WrLogRow>,
    pub deadline: Option<DeadlineReport>,
    /// Non-fatal conditions such as `WRNotConverged`.
    pub warnings: Vec<String>,
    pub stage_history: Vec<(Nanos, String)>,
    /// Hub deliveries per `(producer, consumer)`.
    pub deliveries: BTreeMap<(String, String), u64>,
}

impl RunResult {
    pub fn trace_hash(&self) -> String {
        sha256_hex(self.trace_csv.as_bytes())
    }

    pub fn violations(&self, macro_step: Nanos) -> Vec<Violation> {
        causality_check(&self.consumptions, &self.arrivals, macro_step)
    }

    /// Median staleness in nanoseconds, over consumptions that had a value.
    pub fn median_staleness_ns(&self) -> Option<Nanos> {
        let mut v: Vec<Nanos> = self.staleness.iter().map(|s| s.staleness_ns()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_unstable();
        Some(v[v.len() / 2])
    }

    pub fn grants_csv(&self) -> String {
        let mut out = String::from("barrier_round,granted_until_ns,wall_time_ns\n");
        for g in &self.grants {
            let _ = writeln!(out, "{},{},{}", g.barrier_round, g.granted_until_ns, g.wall_time_ns);
        }
        out
    }

    pub fn wr_log_csv(&self) -> String {
        let mut out = String::from("window_index,iteration,residual,converged\n");
        for r in &self.wr_log {
            let _ = writeln!(out, "{},{},{:e},{}", r.window_index, r.iteration, r.residual, r.converged);
        }
        out
    }

    /// Writes `trace.csv` and the mode-specific artifacts into `dir`.
    pub fn write_artifacts(&self, dir: &Path) -> std::io::Result<Vec<String>> {
        std::fs::create_dir_all(dir)?;
        let mut written = vec!["trace.csv".to_string()];
        std::fs::write(dir.join("trace.csv"), &self.trace_csv)?;
        if self.mode == SyncMode::Conservative {
            std::fs::write(dir.join("grants.csv"), self.grants_csv())?;
            written.push("grants.csv".into());
        }
        if self.mode == SyncMode::WaveformRelaxation {
            std::fs::write(dir.join("wr_log.csv"), self.wr_log_csv())?;
            written.push("wr_log.csv".into());
        }
        if let Some(d) = &self.deadline {
            std::fs::write(dir.join("deadline_report.csv"), d.to_csv())?;
            written.push("deadline_report.csv".into());
        }
        Ok(written)
    }
}

/// Where a participant input comes from.
#[derive(Debug, Clone)]
pub(crate) enum Wire {
    Route { route: usize, delay: u32, default: f64 },
    Board { topic: String, default: f64 },
}

pub(crate) struct Member {
    pub desc: ParticipantDescriptor,
    pub part: Box<dyn Participant>,
    pub session: String,
    pub inputs: Vec<String>,
    pub wires: Vec<Wire>,
    pub outputs: Vec<String>,
}

/// Instantiates every participant and opens its hub session.
pub(crate) fn build_members(hub: &Arc<Hub>, run: &RunHandle, opts: &RunOptions) -> Result<Vec<Member>, SyncError> {
    let exp = &run.exp;
    let mut members = Vec::new();
    for desc in &exp.participants {
        let part: Box<dyn Participant> = if desc.model.is_some() {
            build_participant(desc, &hub.registry().model, exp.seed)?
        } else {
            Box::new(RemoteParticipant::new(hub.clone(), &run.id, desc, opts.watchdog))
        };
        let session = hub.register(&run.id, desc)?;
        let inputs = part.input_topics();
        let wires = inputs
            .iter()
            .map(|topic| {
                let default = desc.default_for(topic);
                match exp.routes.iter().position(|r| r.to.participant == desc.id && r.to.topic == *topic) {
                    Some(route) => Wire::Route { route, delay: exp.routes[route].delay_steps, default },
                    None => Wire::Board { topic: topic.clone(), default },
                }
            })
            .collect();
        let outputs = part.output_topics();
        members.push(Member { desc: desc.clone(), part, session: session.id, inputs, wires, outputs });
    }
    Ok(members)
}

pub(crate) fn initial_inputs(m: &Member, board: &BTreeMap<String, f64>) -> Vec<f64> {
    m.wires
        .iter()
        .map(|w| match w {
            Wire::Route { default, .. } => *default,
            Wire::Board { topic, default } => board.get(topic).copied().unwrap_or(*default),
        })
        .collect()
}

pub(crate) fn board_value(board: &BTreeMap<String, f64>, topic: &str, default: f64) -> f64 {
    board.get(topic).copied().unwrap_or(default)
}

/// Applies stage actions and queued operator setpoints; `false` means stop.
pub(crate) fn boundary_updates(
    hub: &Hub,
    run: &RunHandle,
    actions: &[crate::command::Command],
    board: &mut BTreeMap<String, f64>,
) -> Result<bool, SyncError> {
    let mut go = crate::plant::oracle::apply_actions(actions, board, &hub.registry().model)?;
    for sp in run.take_setpoints() {
        board.insert(sp.topic, sp.value);
    }
    if run.stop_requested() {
        go = false;
    }
    Ok(go)
}

fn empty_result(run: &RunHandle, mode: SyncMode) -> RunResult {
    RunResult {
        run_id: run.id.clone(),
        mode,
        state: RunState::Running,
        trace_csv: String::new(),
        grants: Vec::new(),
        consumptions: Vec::new(),
        arrivals: Vec::new(),
        staleness: Vec::new(),
        wr_log: Vec::new(),
        deadline: None,
        warnings: Vec::new(),
        stage_history: Vec::new(),
        deliveries: BTreeMap::new(),
    }
}

/// Executes an already created run to completion on the calling thread.
pub fn execute(hub: &Arc<Hub>, run: &Arc<RunHandle>, opts: &RunOptions) -> Result<RunResult, SyncError> {
    let mode = opts.mode.unwrap_or(run.exp.sync);
    run.set_state(RunState::Running);
    let mut result = empty_result(run, mode);
    let outcome = build_members(hub, run, opts).and_then(|mut members| match mode {
        SyncMode::Conservative => conservative::run(hub, run, &mut members, &mut result),
        SyncMode::BestEffort => best_effort::run(hub, run, members, &mut result),
        SyncMode::WaveformRelaxation => wr::run(hub, run, &mut members, &mut result),
    });
    hub.close_run_sessions(&run.id);
    result.deliveries = run.router.lock().counters().clone();
    result.trace_csv = hub.store().run_csv(&run.id);
    match outcome {
        Ok(()) => {
            run.set_state(if run.stop_requested() { RunState::Stopped } else { RunState::Completed });
            result.state = run.state();
            Ok(result)
        }
        Err(e) => {
            log::error!("run {} failed: {e}", run.id);
            run.fail(e.to_string());
            Err(e)
        }
    }
}

/// Validates, creates and executes a run synchronously.
pub fn run_experiment(hub: &Arc<Hub>, exp: ExperimentDescription, opts: &RunOptions) -> Result<RunResult, SyncError> {
    crate::experiment::check_structure(&exp).map_err(|e| SyncError::Invalid(e.to_string()))?;
    let mut exp = exp;
    if let Some(m) = opts.mode {
        exp.sync = m;
    }
    let report = validate_layers(&exp, hub.registry());
    if !report.is_valid() {
        return Err(SyncError::Invalid(report.to_text()));
    }
    let clock = match exp.sync {
        SyncMode::BestEffort => RunClock::Wall,
        _ => RunClock::Logical,
    };
    let run = hub.create_run(exp, clock)?;
    execute(hub, &run, opts)
}

/// Default launcher: executes the run on a background thread.
pub fn spawn_run(hub: Arc<Hub>, run: Arc<RunHandle>) {
    std::thread::Builder::new()
        .name(format!("run {}", run.id))
        .spawn(move || {
            let _ = execute(&hub, &run, &RunOptions::default());
        })
        .expect("spawn run thread");
}
