//! Federation hub: sessions, publish/route, the trace store and the
//! permission-gated command gateway.

pub mod protocol;
pub mod remote;
pub mod router;
pub mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use crossbeam_channel::{Receiver, Sender};
use parking_lot::{Condvar, Mutex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::{Command, CommandKind};
use crate::experiment::{validate_layers, ExperimentDescription, ParticipantDescriptor, SyncMode};
use crate::model::{to_canonical, EntryKind, Nanos, SignalSample};
use crate::netem::LinkSpec;
use crate::plant::participant::Conv;
use crate::registry::Registry;

pub use router::{Delivery, Router};
pub use store::{TraceFilter, TraceRecord, TraceStore};

#[derive(Debug, Clone, PartialEq, Error, Serialize, Deserialize)]
#[serde(tag = "error", content = "detail")]
pub enum HubError {
    #[error("DuplicateParticipant: `{0}` already has an active session")]
    DuplicateParticipant(String),
    #[error("UnknownSite: `{0}`")]
    UnknownSite(String),
    #[error("UnknownParticipant: `{0}`")]
    UnknownParticipant(String),
    #[error("UnknownSession: `{0}`")]
    UnknownSession(String),
    #[error("Unauthorized: unknown credentials")]
    Unauthorized,
    #[error("NotOffered: topic `{0}` is not offered by this session")]
    NotOffered(String),
    #[error("StaleSeq: {topic} seq {seq} is not after {last}")]
    StaleSeq { topic: String, seq: u64, last: u64 },
    #[error("PermissionDenied: `{0}` is not granted to this session")]
    PermissionDenied(CommandKind),
    #[error("NoActiveRun")]
    NoActiveRun,
    #[error("UnknownRun: `{0}`")]
    UnknownRun(String),
    #[error("InvalidArgument: {0}")]
    InvalidArgument(String),
    #[error("UnmappedTopic: `{0}`")]
    UnmappedTopic(String),
    #[error("ModelError: {0}")]
    Model(String),
    #[error("LinkDead: `{0}` lost every retransmission")]
    LinkDead(String),
    #[error("IoError: {0}")]
    Io(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Pending,
    Running,
    Completed,
    Stopped,
    Failed,
}

impl RunState {
    pub fn is_active(self) -> bool {
        matches!(self, RunState::Pending | RunState::Running)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStatus {
    pub run: String,
    pub experiment: String,
    pub mode: SyncMode,
    pub state: RunState,
    pub sim_time_ns: Nanos,
    pub duration_ns: Nanos,
    pub stage: Option<String>,
    pub error: Option<String>,
    pub trace_rows: usize,
}

/// A setpoint accepted by the gateway, applied at the next macro boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Setpoint {
    pub topic: String,
    /// Canonical unit.
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunClock {
    /// Trace wall times equal simulation time (reproducible runs).
    Logical,
    /// Trace wall times are nanoseconds since the run started.
    Wall,
}

struct Progress {
    state: RunState,
    sim_time: Nanos,
    stage: Option<String>,
    error: Option<String>,
}

/// One experiment execution.
pub struct RunHandle {
    pub id: String,
    pub exp: ExperimentDescription,
    pub clock: RunClock,
    started: Instant,
    progress: Mutex<Progress>,
    done: Condvar,
    setpoints: Mutex<Vec<Setpoint>>,
    stop: AtomicBool,
    pub router: Mutex<Router>,
}

impl RunHandle {
    pub fn state(&self) -> RunState {
        self.progress.lock().state
    }

    pub fn set_state(&self, state: RunState) {
        let mut p = self.progress.lock();
        // A stop request is final.
        if p.state == RunState::Stopped && state == RunState::Completed {
            return;
        }
        p.state = state;
        if !state.is_active() {
            self.done.notify_all();
        }
    }

    pub fn fail(&self, error: String) {
        let mut p = self.progress.lock();
        p.state = RunState::Failed;
        p.error = Some(error);
        self.done.notify_all();
    }

    pub fn set_progress(&self, sim_time: Nanos, stage: Option<&str>) {
        let mut p = self.progress.lock();
        p.sim_time = sim_time;
        p.stage = stage.map(str::to_string);
    }

    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn stop_requested(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    pub fn push_setpoint(&self, sp: Setpoint) {
        self.setpoints.lock().push(sp);
    }

    pub fn take_setpoints(&self) -> Vec<Setpoint> {
        std::mem::take(&mut *self.setpoints.lock())
    }

    /// Wall time stamped on trace rows published at `sim_time`.
    pub fn wall_time(&self, sim_time: Nanos) -> Nanos {
        match self.clock {
            RunClock::Logical => sim_time,
            RunClock::Wall => self.started.elapsed().as_nanos() as Nanos,
        }
    }

    /// Blocks until the run is no longer active.
    pub fn wait(&self) -> RunState {
        let mut p = self.progress.lock();
        while p.state.is_active() {
            self.done.wait(&mut p);
        }
        p.state
    }

    pub fn error(&self) -> Option<String> {
        self.progress.lock().error.clone()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", content = "id", rename_all = "snake_case")]
pub enum Principal {
    Participant(String),
    Operator(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub principal: Principal,
    pub site: String,
    pub granted: BTreeSet<CommandKind>,
    pub run: Option<String>,
    pub offers: BTreeSet<String>,
    #[serde(skip)]
    last_seq: HashMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamEvent {
    pub run: String,
    pub sample: SignalSample,
    pub wall_time_ns: Nanos,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceList {
    pub sites: Vec<String>,
    pub topics: Vec<crate::model::CanonicalEntry>,
    pub links: Vec<(String, LinkSpec)>,
    pub granted: BTreeSet<CommandKind>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum CommandOutput {
    Started { run: String },
    Stopped { run: String },
    Queued { run: String, topic: String, value: f64, unit: String },
    Trace { records: Vec<TraceRecord> },
    Status { runs: Vec<RunStatus> },
    Resources(ResourceList),
}

/// Starts executing a run; installed by the synchronization layer.
pub type Launcher = Arc<dyn Fn(Arc<Hub>, Arc<RunHandle>) + Send + Sync>;

pub struct Hub {
    registry: Arc<Registry>,
    store: Arc<TraceStore>,
    sessions: Mutex<BTreeMap<String, Session>>,
    active: Mutex<BTreeMap<(String, String), String>>,
    runs: Mutex<BTreeMap<String, Arc<RunHandle>>>,
    counter: AtomicU64,
    subscribers: Mutex<Vec<Sender<StreamEvent>>>,
    pub(crate) remote: remote::RemoteSlots,
    launcher: Mutex<Option<Launcher>>,
}

fn now_ns() -> Nanos {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_nanos() as Nanos).unwrap_or(0)
}

impl Hub {
    pub fn new(registry: Registry) -> Arc<Hub> {
        Self::with_store(registry, TraceStore::new())
    }

    pub fn with_store(registry: Registry, store: TraceStore) -> Arc<Hub> {
        let hub = Arc::new(Hub {
            registry: Arc::new(registry),
            store: Arc::new(store),
            sessions: Mutex::new(BTreeMap::new()),
            active: Mutex::new(BTreeMap::new()),
            runs: Mutex::new(BTreeMap::new()),
            counter: AtomicU64::new(0),
            subscribers: Mutex::new(Vec::new()),
            remote: remote::RemoteSlots::default(),
            launcher: Mutex::new(None),
        });
        let default: Launcher = Arc::new(|hub, run| crate::sync::spawn_run(hub, run));
        *hub.launcher.lock() = Some(default);
        hub
    }

    pub fn set_launcher(&self, launcher: Launcher) {
        *self.launcher.lock() = Some(launcher);
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    pub fn store(&self) -> &TraceStore {
        &self.store
    }

    fn next_id(&self, prefix: &str) -> String {
        format!("{prefix}-{:04}", self.counter.fetch_add(1, Ordering::SeqCst) + 1)
    }

    // ---- runs -------------------------------------------------------------

    /// Creates a run without starting it.
    pub fn create_run(&self, exp: ExperimentDescription, clock: RunClock) -> Result<Arc<RunHandle>, HubError> {
        let router = Router::new(&exp, &self.registry)?;
        let id = self.next_id("run");
        let run = Arc::new(RunHandle {
            id: id.clone(),
            exp,
            clock,
            started: Instant::now(),
            progress: Mutex::new(Progress { state: RunState::Pending, sim_time: 0, stage: None, error: None }),
            done: Condvar::new(),
            setpoints: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
            router: Mutex::new(router),
        });
        self.runs.lock().insert(id, run.clone());
        Ok(run)
    }

    pub fn run(&self, id: &str) -> Option<Arc<RunHandle>> {
        self.runs.lock().get(id).cloned()
    }

    pub fn runs(&self) -> Vec<Arc<RunHandle>> {
        self.runs.lock().values().cloned().collect()
    }

    pub fn status(&self, run: &RunHandle) -> RunStatus {
        let p = run.progress.lock();
        RunStatus {
            run: run.id.clone(),
            experiment: run.exp.id.clone(),
            mode: run.exp.sync,
            state: p.state,
            sim_time_ns: p.sim_time,
            duration_ns: run.exp.duration_ns,
            stage: p.stage.clone(),
            error: p.error.clone(),
            trace_rows: self.store.run_len(&run.id),
        }
    }

    /// Ends all participant sessions of a finished run.
    pub fn close_run_sessions(&self, run: &str) {
        let mut active = self.active.lock();
        let ids: Vec<String> = active.iter().filter(|((r, _), _)| r == run).map(|(_, s)| s.clone()).collect();
        active.retain(|(r, _), _| r != run);
        let mut sessions = self.sessions.lock();
        for id in ids {
            sessions.remove(&id);
        }
    }

    // ---- sessions ---------------------------------------------------------

    /// Opens a participant session within a run.
    pub fn register(&self, run: &str, desc: &ParticipantDescriptor) -> Result<Session, HubError> {
        let site = self.registry.site(&desc.site).ok_or_else(|| HubError::UnknownSite(desc.site.clone()))?;
        let mut active = self.active.lock();
        let key = (run.to_string(), desc.id.clone());
        if active.contains_key(&key) {
            return Err(HubError::DuplicateParticipant(desc.id.clone()));
        }
        let session = Session {
            id: self.next_id("session"),
            principal: Principal::Participant(desc.id.clone()),
            site: site.id.clone(),
            granted: site.allow_list.clone(),
            run: Some(run.to_string()),
            offers: desc.offers.iter().cloned().collect(),
            last_seq: HashMap::new(),
        };
        active.insert(key, session.id.clone());
        self.sessions.lock().insert(session.id.clone(), session.clone());
        Ok(session)
    }

    /// Opens an operator session from a bearer token.
    pub fn login(&self, token: &str) -> Result<Session, HubError> {
        let op = self.registry.operator_by_token(token).ok_or(HubError::Unauthorized)?;
        let session = Session {
            id: self.next_id("session"),
            principal: Principal::Operator(op.id.clone()),
            site: op.site.clone(),
            granted: self.registry.operator_grants(op),
            run: None,
            offers: BTreeSet::new(),
            last_seq: HashMap::new(),
        };
        self.sessions.lock().insert(session.id.clone(), session.clone());
        Ok(session)
    }

    pub fn session(&self, id: &str) -> Option<Session> {
        self.sessions.lock().get(id).cloned()
    }

    pub fn logout(&self, id: &str) {
        if let Some(s) = self.sessions.lock().remove(id) {
            if let (Principal::Participant(p), Some(run)) = (&s.principal, &s.run) {
                self.active.lock().remove(&(run.clone(), p.clone()));
            }
        }
    }

    // ---- data plane -------------------------------------------------------

    /// Stores a canonical sample and forwards it along its routes at network
    /// time `net_now`. With `reliable`, lost messages are retransmitted.
    pub fn publish(&self, session: &str, sample: SignalSample, net_now: Nanos, reliable: bool) -> Result<(), HubError> {
        let run_id = {
            let mut sessions = self.sessions.lock();
            let s = sessions.get_mut(session).ok_or_else(|| HubError::UnknownSession(session.to_string()))?;
            let Principal::Participant(pid) = &s.principal else {
                return Err(HubError::NotOffered(sample.topic.clone()));
            };
            if !s.offers.contains(&sample.topic) || *pid != sample.source {
                return Err(HubError::NotOffered(sample.topic.clone()));
            }
            if let Some(last) = s.last_seq.get(&sample.topic) {
                if sample.seq <= *last {
                    return Err(HubError::StaleSeq { topic: sample.topic.clone(), seq: sample.seq, last: *last });
                }
            }
            s.last_seq.insert(sample.topic.clone(), sample.seq);
            s.run.clone().ok_or(HubError::NoActiveRun)?
        };
        let run = self.run(&run_id).ok_or_else(|| HubError::UnknownRun(run_id.clone()))?;
        let wall = run.wall_time(sample.sim_time);
        self.store.append(&run_id, sample.clone(), wall).map_err(|e| HubError::Io(e.to_string()))?;
        run.router.lock().send(&sample, net_now, reliable)?;
        self.broadcast(StreamEvent { run: run_id, sample, wall_time_ns: wall });
        Ok(())
    }

    /// Stream of every published sample; slow subscribers lose events.
    pub fn subscribe(&self) -> Receiver<StreamEvent> {
        let (tx, rx) = crossbeam_channel::bounded(4096);
        self.subscribers.lock().push(tx);
        rx
    }

    fn broadcast(&self, ev: StreamEvent) {
        let mut subs = self.subscribers.lock();
        if subs.is_empty() {
            return;
        }
        subs.retain(|tx| !matches!(tx.try_send(ev.clone()), Err(crossbeam_channel::TrySendError::Disconnected(_))));
    }

    /// Imports a site-local batch (SCADA replication) into a run's trace.
    /// Either every sample is translated and stored, or none is; already
    /// stored keys are skipped. Returns the number of new rows.
    pub fn replicate(&self, run: &str, site: &str, batch: &[SignalSample]) -> Result<usize, HubError> {
        let site = self.registry.site(site).ok_or_else(|| HubError::UnknownSite(site.to_string()))?;
        let table = site.table();
        let mut rows = Vec::with_capacity(batch.len());
        for s in batch {
            let c = to_canonical(s, &table, &self.registry.model).map_err(|e| match e {
                crate::model::ModelError::UnmappedTopic(t) => HubError::UnmappedTopic(t),
                other => HubError::Model(other.to_string()),
            })?;
            rows.push((c, now_ns()));
        }
        self.store.append_batch(run, rows).map_err(|e| HubError::Io(e.to_string()))
    }

    pub fn query_trace(&self, filter: &TraceFilter) -> Result<Vec<TraceRecord>, HubError> {
        if !self.runs.lock().contains_key(&filter.run) && !self.store.has_run(&filter.run) {
            return Err(HubError::UnknownRun(filter.run.clone()));
        }
        filter.topic_pattern().map_err(|e| HubError::InvalidArgument(format!("topic glob: {e}")))?;
        Ok(self.store.query(filter))
    }

    // ---- command gateway --------------------------------------------------

    /// Executes an operator command. Permission is checked before anything
    /// else, so a denied command has no effect.
    pub fn execute(self: &Arc<Self>, session: &str, cmd: Command) -> Result<CommandOutput, HubError> {
        let s = self.session(session).ok_or_else(|| HubError::UnknownSession(session.to_string()))?;
        if !s.granted.contains(&cmd.kind()) {
            log::warn!("{} denied {} for session {}", s.site, cmd.kind(), s.id);
            return Err(HubError::PermissionDenied(cmd.kind()));
        }
        match cmd {
            Command::StartExperiment { experiment } => {
                let run = self.start(*experiment)?;
                Ok(CommandOutput::Started { run: run.id.clone() })
            }
            Command::StopExperiment { run } => {
                let run = self.resolve_run(run.as_deref().or(s.run.as_deref()))?;
                run.request_stop();
                run.set_state(RunState::Stopped);
                Ok(CommandOutput::Stopped { run: run.id.clone() })
            }
            Command::SetValue { run, topic, value, unit } => {
                let run = self.resolve_run(run.as_deref().or(s.run.as_deref()))?;
                let sp = self.setpoint(&topic, value, &unit)?;
                run.push_setpoint(sp);
                Ok(CommandOutput::Queued { run: run.id.clone(), topic, value, unit })
            }
            Command::QueryTrace { filter } => Ok(CommandOutput::Trace { records: self.query_trace(&filter)? }),
            Command::GetStatus { run } => {
                let runs = match run {
                    Some(id) => vec![self.run(&id).ok_or(HubError::UnknownRun(id))?],
                    None => self.runs(),
                };
                Ok(CommandOutput::Status { runs: runs.iter().map(|r| self.status(r)).collect() })
            }
            Command::ListResources => Ok(CommandOutput::Resources(self.resources(&s))),
        }
    }

    /// Converts a requested setpoint to its canonical unit.
    pub fn setpoint(&self, topic: &str, value: f64, unit: &str) -> Result<Setpoint, HubError> {
        let model = &self.registry.model;
        let entry = model
            .entry(topic)
            .filter(|e| e.kind == EntryKind::Setpoint)
            .ok_or_else(|| HubError::InvalidArgument(format!("`{topic}` is not a canonical setpoint")))?;
        if !value.is_finite() {
            return Err(HubError::InvalidArgument("value must be finite".into()));
        }
        let conv = Conv::new(model, unit, &entry.unit).map_err(|e| HubError::InvalidArgument(e.to_string()))?;
        Ok(Setpoint { topic: topic.to_string(), value: conv.apply(value) })
    }

    /// The named run if active, or the only active run.
    fn resolve_run(&self, id: Option<&str>) -> Result<Arc<RunHandle>, HubError> {
        match id {
            Some(id) => {
                let run = self.run(id).ok_or_else(|| HubError::UnknownRun(id.to_string()))?;
                if run.state().is_active() {
                    Ok(run)
                } else {
                    Err(HubError::NoActiveRun)
                }
            }
            None => {
                let active: Vec<_> = self.runs().into_iter().filter(|r| r.state().is_active()).collect();
                match active.len() {
                    0 => Err(HubError::NoActiveRun),
                    1 => Ok(active[0].clone()),
                    _ => Err(HubError::InvalidArgument("several runs are active; name one".into())),
                }
            }
        }
    }

    fn resources(&self, s: &Session) -> ResourceList {
        let mut links = Vec::new();
        for site in &self.registry.sites {
            for l in &site.links {
                links.push((site.id.clone(), l.clone()));
            }
        }
        ResourceList {
            sites: self.registry.sites.iter().map(|s| s.id.clone()).collect(),
            topics: self.registry.model.entries.clone(),
            links,
            granted: s.granted.clone(),
        }
    }

    /// Validates an experiment and starts executing it.
    pub fn start(self: &Arc<Self>, exp: ExperimentDescription) -> Result<Arc<RunHandle>, HubError> {
        crate::experiment::check_structure(&exp).map_err(|e| HubError::InvalidArgument(e.to_string()))?;
        let report = validate_layers(&exp, &self.registry);
        if !report.is_valid() {
            return Err(HubError::InvalidArgument(report.to_text()));
        }
        let clock = if exp.sync == SyncMode::BestEffort { RunClock::Wall } else { RunClock::Logical };
        let run = self.create_run(exp, clock)?;
        run.set_state(RunState::Running);
        let launcher = self.launcher.lock().clone();
        if let Some(l) = launcher {
            l(self.clone(), run.clone());
        }
        Ok(run)
    }
}
