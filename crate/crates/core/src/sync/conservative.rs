//! Barrier-synchronized stepping: no participant sees a value before it is
//! due, whatever the network does.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;
use std::time::Instant;

use crate::experiment::{ExperimentDescription, StageMachine};
use crate::hub::{Hub, RunHandle};
use crate::model::{Nanos, SignalSample, Value};
use crate::plant::{PlantError, Track};

use super::{
    board_value, boundary_updates, initial_inputs, step_error, Arrival, Consumption, GrantRow, Member, RunResult,
    SyncError, Wire,
};

pub(crate) type History = HashMap<usize, BTreeMap<Nanos, f64>>;

/// Groups participants so that every zero-delay producer is stepped before
/// its consumers; participants within one group run in parallel.
pub(crate) fn levels(exp: &ExperimentDescription, members: &[Member]) -> Result<Vec<Vec<usize>>, SyncError> {
    let idx: HashMap<&str, usize> = members.iter().enumerate().map(|(i, m)| (m.desc.id.as_str(), i)).collect();
    let mut edges: BTreeSet<(usize, usize)> = BTreeSet::new();
    for r in exp.routes.iter().filter(|r| r.delay_steps == 0) {
        if let (Some(&a), Some(&b)) = (idx.get(r.from.participant.as_str()), idx.get(r.to.participant.as_str())) {
            edges.insert((a, b));
        }
    }
    let mut indeg = vec![0usize; members.len()];
    for (_, b) in &edges {
        indeg[*b] += 1;
    }
    let mut done = vec![false; members.len()];
    let mut out = Vec::new();
    loop {
        let level: Vec<usize> = (0..members.len()).filter(|i| !done[*i] && indeg[*i] == 0).collect();
        if level.is_empty() {
            break;
        }
        for &i in &level {
            done[i] = true;
            for (_, b) in edges.iter().filter(|(a, _)| *a == i) {
                indeg[*b] -= 1;
            }
        }
        out.push(level);
    }
    if done.iter().any(|d| !d) {
        return Err(SyncError::Invalid("zero-delay routes form a cycle".into()));
    }
    Ok(out)
}

pub(crate) fn unit_of(hub: &Hub, topic: &str) -> String {
    hub.registry().model.entry(topic).map(|e| e.unit.clone()).unwrap_or_default()
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn publish_outputs(
    hub: &Hub,
    member: &Member,
    values: &[f64],
    t: Nanos,
    seq: u64,
    net: Nanos,
    obs: &mut BTreeMap<String, f64>,
) -> Result<(), SyncError> {
    for (topic, v) in member.outputs.iter().zip(values) {
        let sample = SignalSample::real(topic, t, *v, &unit_of(hub, topic), &member.desc.id, seq);
        hub.publish(&member.session, sample, net, true)?;
        obs.insert(topic.clone(), *v);
    }
    Ok(())
}

/// Delivers everything in flight, advancing the network clock as needed.
pub(crate) fn drain(run: &RunHandle, net: &mut Nanos, arrival: Nanos, hist: &mut History, arrivals: &mut Vec<Arrival>) {
    let mut router = run.router.lock();
    loop {
        for (_, d) in router.deliver_due(*net) {
            if let Value::Real(v) = d.sample.value {
                hist.entry(d.route).or_default().insert(d.sample.sim_time, v);
            }
            arrivals.push(Arrival { route: d.route, produced_at: d.sample.sim_time, arrival });
        }
        match router.next_due() {
            Some(t) => *net = (*net).max(t),
            None => break,
        }
    }
}

fn lookup(hist: &History, route: usize, t: Nanos) -> Result<f64, PlantError> {
    hist.get(&route)
        .and_then(|h| h.get(&t))
        .copied()
        .ok_or_else(|| PlantError::Fault(format!("route {route} has no sample for {t} ns")))
}

pub(super) fn run(
    hub: &Arc<Hub>,
    run: &RunHandle,
    members: &mut [Member],
    result: &mut RunResult,
) -> Result<(), SyncError> {
    let exp = &run.exp;
    let m = exp.macro_step_ns;
    let levels = levels(exp, members)?;
    let started = Instant::now();
    let mut stages = StageMachine::new(&exp.stages, &exp.initial_stage, m)?;
    let mut board = BTreeMap::new();
    let mut hist = History::new();
    let mut obs = BTreeMap::new();
    let mut net: Nanos = 0;

    let mut initial = Vec::with_capacity(members.len());
    for mem in members.iter_mut() {
        let u = initial_inputs(mem, &board);
        initial.push(mem.part.initialize(&u).map_err(|e| step_error(&mem.desc.id, e))?);
    }
    for (mem, y) in members.iter().zip(&initial) {
        publish_outputs(hub, mem, y, 0, 0, net, &mut obs)?;
    }
    drain(run, &mut net, 0, &mut hist, &mut result.arrivals);

    for k in 0..exp.macro_steps() {
        let (t0, t1) = (k * m, (k + 1) * m);
        let actions = stages.stage_step(&obs, t0)?;
        let go = boundary_updates(hub, run, &actions, &mut board)?;
        run.set_progress(t0, stages.current());
        if !go {
            break;
        }
        result.grants.push(GrantRow {
            barrier_round: k + 1,
            granted_until_ns: t1,
            wall_time_ns: started.elapsed().as_nanos() as Nanos,
        });
        for level in &levels {
            let mut jobs: Vec<(&mut Member, Vec<Track>)> = Vec::with_capacity(level.len());
            for (i, mem) in members.iter_mut().enumerate() {
                if !level.contains(&i) {
                    continue;
                }
                let mut tracks = Vec::with_capacity(mem.wires.len());
                for w in &mem.wires {
                    tracks.push(match w {
                        Wire::Route { route, delay: 0, .. } => {
                            result.consumptions.push(Consumption { route: *route, delay_steps: 0, used_at: t0 });
                            Track::linear(t0, lookup(&hist, *route, t0)?, t1, lookup(&hist, *route, t1)?)
                        }
                        Wire::Route { route, delay, .. } => {
                            let need = (t1).saturating_sub(*delay as Nanos * m);
                            result.consumptions.push(Consumption { route: *route, delay_steps: *delay, used_at: t0 });
                            Track::constant(lookup(&hist, *route, need)?)
                        }
                        Wire::Board { topic, default } => Track::constant(board_value(&board, topic, *default)),
                    });
                }
                jobs.push((mem, tracks));
            }
            let outputs: Vec<Result<Vec<f64>, PlantError>> = if jobs.len() == 1 {
                let (mem, tracks) = jobs.pop().expect("one job");
                vec![mem.part.advance(t0, t1, &tracks)]
            } else {
                std::thread::scope(|s| {
                    let handles: Vec<_> = jobs
                        .iter_mut()
                        .map(|(mem, tracks)| s.spawn(move || mem.part.advance(t0, t1, tracks)))
                        .collect();
                    handles.into_iter().map(|h| h.join().expect("participant thread panicked")).collect()
                })
            };
            for (&i, y) in level.iter().zip(outputs) {
                publish_outputs(
                    hub,
                    &members[i],
                    &y.map_err(|e| step_error(&members[i].desc.id, e))?,
                    t1,
                    k + 1,
                    net,
                    &mut obs,
                )?;
            }
            drain(run, &mut net, t0, &mut hist, &mut result.arrivals);
        }
    }
    if let Some(last) = result.grants.last() {
        run.set_progress(last.granted_until_ns, stages.current());
    }
    result.stage_history = stages.history().to_vec();
    Ok(())
}
