//! Monolithic reference solution: every block assembled into one linear
//! system and integrated without coupling delays (fourth-order Runge–Kutta
//! substeps, so it stays well ahead of the trapezoidal participants).

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::command::Command;
use crate::experiment::{ExperimentDescription, StageMachine};
use crate::model::{CanonicalModel, Nanos, SignalSample};
use crate::trace::{sort_rows, write_csv, TraceRow};

use super::block::{check_finite, seconds, LinearModel, Port, Side, StateSpace, Trapezoid};
use super::participant::Conv;
use super::PlantError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleOptions {
    /// Integration substeps per macro step.
    pub substeps: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions { substeps: 100 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSeries {
    pub source: String,
    pub unit: String,
    pub values: Vec<f64>,
}

/// Outputs of every block on the macro grid, canonical topics and units.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleTrace {
    pub times: Vec<Nanos>,
    pub series: BTreeMap<String, OracleSeries>,
}

impl OracleTrace {
    pub fn value(&self, topic: &str, t: Nanos) -> Option<f64> {
        let k = self.times.binary_search(&t).ok()?;
        self.series.get(topic).map(|s| s.values[k])
    }

    pub fn rows(&self) -> Vec<TraceRow> {
        let mut rows = Vec::new();
        for (topic, s) in &self.series {
            for (k, (t, v)) in self.times.iter().zip(&s.values).enumerate() {
                rows.push(TraceRow {
                    sample: SignalSample::real(topic, *t, *v, &s.unit, &s.source, k as u64),
                    wall_time_ns: *t,
                });
            }
        }
        sort_rows(&mut rows);
        rows
    }

    pub fn to_csv(&self) -> String {
        write_csv(&self.rows())
    }
}

struct Block<'a> {
    model: &'a dyn LinearModel,
    states: usize,
    inputs: usize,
    outputs: usize,
}

/// The coupled system `x' = A'x + B'v + e'(t)`, `y = C'x + D'v + f'(t)`.
struct Assembled<'a> {
    blocks: Vec<Block<'a>>,
    ss: StateSpace,
    /// `B W K`, mapping block output forcing into state derivatives.
    bwk: DMatrix<f64>,
    k: DMatrix<f64>,
}

impl Assembled<'_> {
    fn stacked_forcing(&self, t: Nanos, side: Side) -> (DVector<f64>, DVector<f64>) {
        let n: usize = self.blocks.iter().map(|b| b.states).sum();
        let p: usize = self.blocks.iter().map(|b| b.outputs).sum();
        let (mut e, mut f) = (DVector::zeros(n), DVector::zeros(p));
        let (mut i, mut j) = (0, 0);
        for b in &self.blocks {
            let (be, bf) = b.model.forcing(t, side);
            e.rows_mut(i, b.states).copy_from(&be);
            f.rows_mut(j, b.outputs).copy_from(&bf);
            i += b.states;
            j += b.outputs;
        }
        (e, f)
    }
}

impl Assembled<'_> {
    /// One classical Runge–Kutta step with the assembled inputs held at `v`.
    fn rk4(&self, x: &DVector<f64>, t: Nanos, h: Nanos, v: &DVector<f64>) -> Result<DVector<f64>, PlantError> {
        let hs = seconds(h);
        let bv = &self.ss.b * v;
        let f = |t: Nanos, side: Side, x: &DVector<f64>| &self.ss.a * x + &bv + self.forcing(t, side).0;
        let mid = t + h / 2;
        let k1 = f(t, Side::Right, x);
        let k2 = f(mid, Side::Right, &(x + &k1 * (hs / 2.0)));
        let k3 = f(mid, Side::Right, &(x + &k2 * (hs / 2.0)));
        let k4 = f(t + h, Side::Left, &(x + &k3 * hs));
        let next = x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (hs / 6.0);
        check_finite(next.iter())?;
        Ok(next)
    }
}

impl LinearModel for Assembled<'_> {
    fn state_space(&self) -> StateSpace {
        self.ss.clone()
    }

    fn forcing(&self, t: Nanos, side: Side) -> (DVector<f64>, DVector<f64>) {
        let (e, f) = self.stacked_forcing(t, side);
        (e + &self.bwk * &f, &self.k * f)
    }

    fn input_ports(&self) -> Vec<Port> {
        Vec::new()
    }

    fn output_ports(&self) -> Vec<Port> {
        Vec::new()
    }

    fn initial_state(&self, _u0: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(self.ss.states())
    }
}

/// Source of one assembled input.
enum InputSource {
    /// `u = a * y[output] + b`.
    Routed { output: usize, a: f64, b: f64 },
    /// Setpoint board or default, converted by `conv`.
    Board { topic: String, default: f64, conv: Conv },
}

fn affine(convs: &[Conv]) -> (f64, f64) {
    let g = |x: f64| convs.iter().fold(x, |v, c| c.apply(v));
    let b = g(0.0);
    (g(1.0) - b, b)
}

fn entry_unit(model: &CanonicalModel, topic: &str) -> Result<String, PlantError> {
    model.entry_unit(topic).map(|u| u.symbol.clone()).map_err(|e| PlantError::InvalidModel(e.to_string()))
}

/// Applies the `set_value` actions of a stage entry; returns `false` on stop.
pub(crate) fn apply_actions(
    actions: &[Command],
    board: &mut BTreeMap<String, f64>,
    model: &CanonicalModel,
) -> Result<bool, PlantError> {
    for a in actions {
        match a {
            Command::SetValue { topic, value, unit, .. } => {
                let to = entry_unit(model, topic)?;
                board.insert(topic.clone(), Conv::new(model, unit, &to)?.apply(*value));
            }
            Command::StopExperiment { .. } => return Ok(false),
            _ => {}
        }
    }
    Ok(true)
}

/// Solves the whole experiment as one system of equations.
///
/// Routes are treated as ideal, instantaneous couplings. Stage transitions and
/// their `set_value` actions are evaluated at macro-step boundaries exactly as
/// the co-simulation master does. Experiments with hardware-in-the-loop,
/// network or remote participants cannot be assembled and yield
/// [`PlantError::UnsupportedTopology`].
pub fn monolithic_oracle(
    exp: &ExperimentDescription,
    model: &CanonicalModel,
    opts: OracleOptions,
) -> Result<OracleTrace, PlantError> {
    let mut blocks = Vec::new();
    let mut owners = Vec::new();
    for p in &exp.participants {
        let lin =
            p.model.as_ref().and_then(|m| m.linear()).ok_or_else(|| {
                PlantError::UnsupportedTopology(format!("participant `{}` has no linear model", p.id))
            })?;
        p.model.as_ref().expect("checked").check()?;
        let ss = lin.state_space();
        blocks.push(Block { model: lin, states: ss.states(), inputs: ss.inputs(), outputs: ss.outputs() });
        owners.push(p);
    }
    let n: usize = blocks.iter().map(|b| b.states).sum();
    let m: usize = blocks.iter().map(|b| b.inputs).sum();
    let p: usize = blocks.iter().map(|b| b.outputs).sum();

    let (mut a, mut b, mut c, mut d) =
        (DMatrix::zeros(n, n), DMatrix::zeros(n, m), DMatrix::zeros(p, n), DMatrix::zeros(p, m));
    let mut out_ports: Vec<(String, Port, Conv)> = Vec::new();
    let (mut si, mut ui, mut yi) = (0, 0, 0);
    for (blk, owner) in blocks.iter().zip(&owners) {
        let ss = blk.model.state_space();
        a.view_mut((si, si), (blk.states, blk.states)).copy_from(&ss.a);
        b.view_mut((si, ui), (blk.states, blk.inputs)).copy_from(&ss.b);
        c.view_mut((yi, si), (blk.outputs, blk.states)).copy_from(&ss.c);
        d.view_mut((yi, ui), (blk.outputs, blk.inputs)).copy_from(&ss.d);
        for port in blk.model.output_ports() {
            let conv = Conv::new(model, &port.unit, &entry_unit(model, &port.topic)?)?;
            out_ports.push((owner.id.clone(), port, conv));
        }
        si += blk.states;
        ui += blk.inputs;
        yi += blk.outputs;
    }

    // Input wiring.
    let mut sources = Vec::with_capacity(m);
    for (blk, owner) in blocks.iter().zip(&owners) {
        for port in blk.model.input_ports() {
            let route = exp.routes.iter().find(|r| r.to.participant == owner.id && r.to.topic == port.topic);
            let src = match route {
                Some(r) => {
                    let output = out_ports
                        .iter()
                        .position(|(pid, op, _)| *pid == r.from.participant && op.topic == r.from.topic)
                        .ok_or_else(|| {
                            PlantError::UnsupportedTopology(format!(
                                "route source {}/{} is not an output",
                                r.from.participant, r.from.topic
                            ))
                        })?;
                    let (_, op, to_canon) = &out_ports[output];
                    let chain = [
                        to_canon.clone(),
                        Conv::new(model, &entry_unit(model, &op.topic)?, &entry_unit(model, &r.to.topic)?)?,
                        Conv::new(model, &entry_unit(model, &r.to.topic)?, &port.unit)?,
                    ];
                    let (a, b) = affine(&chain);
                    InputSource::Routed { output, a, b }
                }
                None => InputSource::Board {
                    topic: port.topic.clone(),
                    default: owner.default_for(&port.topic),
                    conv: Conv::new(model, &entry_unit(model, &port.topic)?, &port.unit)?,
                },
            };
            sources.push(src);
        }
    }
    let mut w = DMatrix::zeros(m, p);
    for (j, s) in sources.iter().enumerate() {
        if let InputSource::Routed { output, a, .. } = s {
            w[(j, *output)] = *a;
        }
    }
    let k = (DMatrix::identity(p, p) - &d * &w)
        .try_inverse()
        .ok_or_else(|| PlantError::Singular("algebraic loop between block outputs".into()))?;
    let bwk = &b * &w * &k;
    let ss = StateSpace { a: &a + &bwk * &c, b: &b + &bwk * &d, c: &k * &c, d: &k * &d };
    let sys = Assembled { blocks, ss, bwk, k };

    let board_vector = |board: &BTreeMap<String, f64>| -> DVector<f64> {
        DVector::from_iterator(
            m,
            sources.iter().map(|s| match s {
                InputSource::Routed { b, .. } => *b,
                InputSource::Board { topic, default, conv } => {
                    conv.apply(board.get(topic).copied().unwrap_or(*default))
                }
            }),
        )
    };

    // Initial state from each block's assumed start inputs (defaults).
    let mut x = DVector::zeros(n);
    let (mut si, mut ui) = (0, 0);
    for (blk, owner) in sys.blocks.iter().zip(&owners) {
        let u0 = DVector::from_iterator(
            blk.inputs,
            sources[ui..ui + blk.inputs].iter().zip(blk.model.input_ports()).map(|(s, port)| match s {
                InputSource::Board { default, conv, .. } => conv.apply(*default),
                InputSource::Routed { .. } => {
                    let to = entry_unit(model, &port.topic).unwrap_or_default();
                    Conv::new(model, &to, &port.unit).map(|c| c.apply(owner.default_for(&port.topic))).unwrap_or(0.0)
                }
            }),
        );
        x.rows_mut(si, blk.states).copy_from(&blk.model.initial_state(&u0));
        si += blk.states;
        ui += blk.inputs;
    }

    let macro_step = exp.macro_step_ns;
    let h = if opts.substeps > 0 && macro_step % opts.substeps == 0 { macro_step / opts.substeps } else { macro_step };
    let substeps = macro_step / h;
    let tr = Trapezoid::new(sys.ss.clone(), h)?;
    let mut stages = StageMachine::new(&exp.stages, &exp.initial_stage, macro_step)
        .map_err(|e| PlantError::InvalidModel(e.to_string()))?;
    let mut board = BTreeMap::new();
    let mut trace = OracleTrace { times: Vec::new(), series: BTreeMap::new() };
    for (pid, port, _) in &out_ports {
        let unit = entry_unit(model, &port.topic)?;
        trace.series.insert(port.topic.clone(), OracleSeries { source: pid.clone(), unit, values: Vec::new() });
    }

    for step in 0..=exp.macro_steps() {
        let t = step * macro_step;
        let v = board_vector(&board);
        let y = tr.output(&sys, &x, t, &v, Side::Right)?;
        trace.times.push(t);
        let mut obs = BTreeMap::new();
        for ((_, port, conv), yv) in out_ports.iter().zip(y.iter()) {
            let val = conv.apply(*yv);
            trace.series.get_mut(&port.topic).expect("inserted").values.push(val);
            obs.insert(port.topic.clone(), val);
        }
        if step == exp.macro_steps() {
            break;
        }
        let actions = stages.stage_step(&obs, t).map_err(|e| PlantError::Fault(e.to_string()))?;
        if !apply_actions(&actions, &mut board, model)? {
            break;
        }
        let v = board_vector(&board);
        for s in 0..substeps {
            x = sys.rk4(&x, t + s * h, h, &v)?;
        }
    }
    Ok(trace)
}
