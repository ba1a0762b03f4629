//! Jacobi waveform relaxation: every participant integrates a whole window
//! against the previous iterate of its inputs until the exchanged waveforms
//! stop changing.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::experiment::StageMachine;
use crate::hub::{Hub, RunHandle};
use crate::model::Nanos;
use crate::plant::participant::Conv;
use crate::plant::{Snapshot, Track};

use super::conservative::publish_outputs;
use super::{board_value, boundary_updates, initial_inputs, step_error, Member, RunResult, SyncError, Wire, WrLogRow};

/// Producer `(member, output)` and unit conversion of each route.
struct RouteSrc {
    member: usize,
    output: usize,
    conv: Conv,
}

fn route_sources(hub: &Hub, run: &RunHandle, members: &[Member]) -> Result<Vec<RouteSrc>, SyncError> {
    let model = &hub.registry().model;
    let unit = |t: &str| model.entry(t).map(|e| e.unit.clone()).unwrap_or_default();
    run.exp
        .routes
        .iter()
        .map(|r| {
            let member = members
                .iter()
                .position(|m| m.desc.id == r.from.participant)
                .ok_or_else(|| SyncError::Invalid(format!("unknown participant {}", r.from.participant)))?;
            let output = members[member].outputs.iter().position(|t| *t == r.from.topic).ok_or_else(|| {
                SyncError::Invalid(format!("{} does not output {}", r.from.participant, r.from.topic))
            })?;
            let conv = Conv::new(model, &unit(&r.from.topic), &unit(&r.to.topic))?;
            Ok(RouteSrc { member, output, conv })
        })
        .collect()
}

/// `waves[member][output][j]`: value at macro point `k0 + j` of the window.
type Waves = Vec<Vec<Vec<f64>>>;

pub(super) fn run(
    hub: &Arc<Hub>,
    run: &RunHandle,
    members: &mut [Member],
    result: &mut RunResult,
) -> Result<(), SyncError> {
    let exp = &run.exp;
    let cfg = exp.wr.clone().ok_or_else(|| SyncError::Invalid("waveform relaxation needs `wr`".into()))?;
    let m = exp.macro_step_ns;
    if cfg.window_ns % m != 0 || exp.duration_ns % cfg.window_ns != 0 {
        return Err(SyncError::Invalid("window must be a multiple of the macro step and divide the duration".into()));
    }
    let per = (cfg.window_ns / m) as usize;
    let sources = route_sources(hub, run, members)?;
    let mut stages = StageMachine::new(&exp.stages, &exp.initial_stage, m)?;
    let mut board = BTreeMap::new();
    let mut obs = BTreeMap::new();

    // Accepted outputs on the macro grid: hist[member][output][k].
    let mut hist: Vec<Vec<Vec<f64>>> = Vec::with_capacity(members.len());
    for mem in members.iter_mut() {
        let u = initial_inputs(mem, &board);
        let y = mem.part.initialize(&u).map_err(|e| step_error(&mem.desc.id, e))?;
        publish_outputs(hub, mem, &y, 0, 0, 0, &mut obs)?;
        hist.push(y.into_iter().map(|v| vec![v]).collect());
    }
    run.router.lock().deliver_due(Nanos::MAX);

    for wi in 0..exp.duration_ns / cfg.window_ns {
        let k0 = wi as usize * per;
        let t_start = k0 as Nanos * m;
        let actions = stages.stage_step(&obs, t_start)?;
        let go = boundary_updates(hub, run, &actions, &mut board)?;
        run.set_progress(t_start, stages.current());
        if !go {
            break;
        }
        let snaps: Vec<Snapshot> = members.iter().map(|mem| mem.part.save()).collect::<Result<_, _>>()?;
        let mut cand: Waves = hist.iter().map(|outs| outs.iter().map(|h| vec![h[k0]; per + 1]).collect()).collect();
        for it in 1..=cfg.max_iter {
            if it > 1 {
                for (mem, s) in members.iter_mut().zip(&snaps) {
                    mem.part.restore(s)?;
                }
            }
            let mut next: Waves = Vec::with_capacity(members.len());
            for (mi, mem) in members.iter_mut().enumerate() {
                let tracks: Vec<Track> = mem
                    .wires
                    .iter()
                    .map(|w| match w {
                        Wire::Route { route, delay, .. } => {
                            let src = &sources[*route];
                            let points = (0..=per)
                                .map(|j| {
                                    let k = k0 + j;
                                    let v = match k.checked_sub(*delay as usize) {
                                        Some(kd) if kd >= k0 => cand[src.member][src.output][kd - k0],
                                        Some(kd) => hist[src.member][src.output][kd],
                                        None => hist[src.member][src.output][0],
                                    };
                                    (k as Nanos * m, src.conv.apply(v))
                                })
                                .collect();
                            Track::from_points(points)
                        }
                        Wire::Board { topic, default } => Track::constant(board_value(&board, topic, *default)),
                    })
                    .collect();
                let mut outs: Vec<Vec<f64>> = hist[mi].iter().map(|h| vec![h[k0]]).collect();
                for j in 0..per {
                    let t0 = (k0 + j) as Nanos * m;
                    let y = mem.part.advance(t0, t0 + m, &tracks).map_err(|e| step_error(&mem.desc.id, e))?;
                    for (o, v) in outs.iter_mut().zip(y) {
                        o.push(v);
                    }
                }
                next.push(outs);
            }
            let residual = sources
                .iter()
                .flat_map(|s| {
                    next[s.member][s.output].iter().zip(&cand[s.member][s.output]).map(|(a, b)| (a - b).abs())
                })
                .fold(0.0f64, f64::max);
            let converged = residual <= cfg.tol;
            result.wr_log.push(WrLogRow { window_index: wi, iteration: it, residual, converged });
            cand = next;
            if converged {
                break;
            }
            if it == cfg.max_iter {
                let msg = format!("WRNotConverged: window {wi} residual {residual:e} after {it} iterations");
                log::warn!("{msg}");
                result.warnings.push(msg);
            }
        }
        for (mi, mem) in members.iter().enumerate() {
            for j in 1..=per {
                let y: Vec<f64> = cand[mi].iter().map(|o| o[j]).collect();
                let k = k0 + j;
                publish_outputs(hub, mem, &y, k as Nanos * m, k as u64, k as Nanos * m, &mut obs)?;
                for (h, v) in hist[mi].iter_mut().zip(y) {
                    h.push(v);
                }
            }
        }
        run.router.lock().deliver_due(Nanos::MAX);
    }
    result.stage_history = stages.history().to_vec();
    Ok(())
}
