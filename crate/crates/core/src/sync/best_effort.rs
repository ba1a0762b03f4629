//! Free-running participants paced by the wall clock. Each one uses
//! whatever value arrived last; nothing waits for the network.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};

use crate::experiment::StageMachine;
use crate::hub::{Hub, RunHandle};
use crate::model::{Nanos, Quality, SignalSample, Value};
use crate::plant::{DeadlineReport, Track};

use super::conservative::unit_of;
use super::{
    board_value, boundary_updates, initial_inputs, step_error, Arrival, Consumption, Member, RunResult,
    StalenessRecord, SyncError, Wire,
};

#[derive(Debug, Clone, Copy)]
struct Latest {
    value: f64,
    produced_at: Nanos,
}

#[derive(Default)]
struct Records {
    consumptions: Vec<Consumption>,
    arrivals: Vec<Arrival>,
    staleness: Vec<StalenessRecord>,
    deadline: DeadlineReport,
    has_deadline: bool,
}

struct Shared {
    start: Instant,
    inbox: Mutex<HashMap<usize, Latest>>,
    board: RwLock<BTreeMap<String, f64>>,
    obs: Mutex<BTreeMap<String, f64>>,
    records: Mutex<Records>,
    stop: AtomicBool,
    error: Mutex<Option<SyncError>>,
}

impl Shared {
    fn elapsed(&self) -> Nanos {
        self.start.elapsed().as_nanos() as Nanos
    }

    fn sleep_until(&self, t: Nanos) {
        let now = self.elapsed();
        if t > now {
            std::thread::sleep(Duration::from_nanos(t - now));
        }
    }

    /// Moves every delivery due by `now` into the inboxes.
    fn pump(&self, run: &RunHandle, now: Nanos) {
        let due = run.router.lock().deliver_due(now);
        if due.is_empty() {
            return;
        }
        let mut inbox = self.inbox.lock();
        let mut rec = self.records.lock();
        for (sd, d) in due {
            if let Value::Real(v) = d.sample.value {
                inbox.insert(d.route, Latest { value: v, produced_at: d.sample.sim_time });
            }
            rec.arrivals.push(Arrival { route: d.route, produced_at: d.sample.sim_time, arrival: sd.deliver_time });
        }
    }

    fn fail(&self, e: SyncError) {
        self.error.lock().get_or_insert(e);
        self.stop.store(true, Ordering::SeqCst);
    }
}

fn member_loop(hub: &Hub, run: &RunHandle, shared: &Shared, mem: &mut Member, y0: Vec<f64>) -> Result<(), SyncError> {
    let h = mem.desc.step_ns;
    let n = run.exp.duration_ns / h;
    let units: Vec<String> = mem.outputs.iter().map(|t| unit_of(hub, t)).collect();
    let mut y = y0;
    let mut quality = Quality::Good;
    for k in 0..=n {
        let t = k * h;
        shared.sleep_until(t);
        if shared.stop.load(Ordering::SeqCst) {
            break;
        }
        let now = shared.elapsed().max(t);
        {
            let mut obs = shared.obs.lock();
            for ((topic, v), unit) in mem.outputs.iter().zip(&y).zip(&units) {
                let mut s = SignalSample::real(topic, t, *v, unit, &mem.desc.id, k);
                s.quality = quality;
                hub.publish(&mem.session, s, now, false)?;
                obs.insert(topic.clone(), *v);
            }
        }
        if k == n {
            break;
        }
        shared.pump(run, now);
        let mut worst = Quality::Good;
        let mut tracks = Vec::with_capacity(mem.wires.len());
        {
            let inbox = shared.inbox.lock();
            let board = shared.board.read();
            let mut rec = shared.records.lock();
            for (w, topic) in mem.wires.iter().zip(&mem.inputs) {
                let v = match w {
                    Wire::Route { route, delay, default } => {
                        rec.consumptions.push(Consumption { route: *route, delay_steps: *delay, used_at: t });
                        match inbox.get(route) {
                            Some(l) => {
                                if t.saturating_sub(l.produced_at) > h {
                                    worst = worst.max(Quality::Stale);
                                }
                                rec.staleness.push(StalenessRecord {
                                    consumer: mem.desc.id.clone(),
                                    topic: topic.clone(),
                                    used_at: t,
                                    produced_at: l.produced_at,
                                });
                                l.value
                            }
                            None => {
                                worst = Quality::Bad;
                                *default
                            }
                        }
                    }
                    Wire::Board { topic, default } => board_value(&board, topic, *default),
                };
                tracks.push(Track::constant(v));
            }
        }
        quality = if worst == Quality::Bad { Quality::Estimated } else { worst };
        let began = Instant::now();
        y = mem.part.advance(t, t + h, &tracks).map_err(|e| step_error(&mem.desc.id, e))?;
        if let Some(budget) = mem.desc.realtime_deadline_ns {
            let mut rec = shared.records.lock();
            rec.has_deadline = true;
            rec.deadline.push(k, budget, began.elapsed().as_nanos() as Nanos);
        }
    }
    Ok(())
}

pub(super) fn run(
    hub: &Arc<Hub>,
    run: &RunHandle,
    mut members: Vec<Member>,
    result: &mut RunResult,
) -> Result<(), SyncError> {
    let exp = &run.exp;
    let m = exp.macro_step_ns;
    let mut stages = StageMachine::new(&exp.stages, &exp.initial_stage, m)?;
    let board = BTreeMap::new();
    let mut initial = Vec::with_capacity(members.len());
    for mem in members.iter_mut() {
        let u = initial_inputs(mem, &board);
        initial.push(mem.part.initialize(&u).map_err(|e| step_error(&mem.desc.id, e))?);
    }
    let shared = Shared {
        start: Instant::now(),
        inbox: Mutex::new(HashMap::new()),
        board: RwLock::new(board),
        obs: Mutex::new(BTreeMap::new()),
        records: Mutex::new(Records::default()),
        stop: AtomicBool::new(false),
        error: Mutex::new(None),
    };
    std::thread::scope(|s| {
        for (mem, y0) in members.iter_mut().zip(initial) {
            let shared = &shared;
            s.spawn(move || {
                if let Err(e) = member_loop(hub, run, shared, mem, y0) {
                    shared.fail(e);
                }
            });
        }
        for k in 0..exp.macro_steps() {
            let t = k * m;
            shared.sleep_until(t);
            if shared.stop.load(Ordering::SeqCst) {
                break;
            }
            let obs = shared.obs.lock().clone();
            let step = stages
                .stage_step(&obs, t)
                .map_err(SyncError::from)
                .and_then(|actions| boundary_updates(hub, run, &actions, &mut shared.board.write()));
            run.set_progress(t, stages.current());
            match step {
                Ok(true) => {}
                Ok(false) => shared.stop.store(true, Ordering::SeqCst),
                Err(e) => shared.fail(e),
            }
        }
    });
    if let Some(e) = shared.error.lock().take() {
        return Err(e);
    }
    run.set_progress(exp.duration_ns, stages.current());
    let rec = std::mem::take(&mut *shared.records.lock());
    result.consumptions = rec.consumptions;
    result.arrivals = rec.arrivals;
    result.staleness = rec.staleness;
    if rec.has_deadline {
        result.deadline = Some(rec.deadline);
    }
    result.stage_history = stages.history().to_vec();
    Ok(())
}
