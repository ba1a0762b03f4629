//! Thevenin source feeding a resistive load, with an optional series
//! inductance and a controllable current injection at the load node.
//!
//! ```text
//!   Vs(t) ──Rs──Ls──┬── node ──┐
//!                   │          │ I_inj (DER)
//!                   Rl         ↑
//!                   │          │
//!   ────────────────┴──────────┘
//! ```

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{Nanos, SignalSample};

use super::block::{seconds, LinearModel, Port, Side, StateSpace, Trapezoid};
use super::PlantError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceStep {
    pub at_ns: Nanos,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSine {
    pub amplitude: f64,
    pub freq_hz: f64,
}

/// Source voltage waveform: dc level plus an optional step and sine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceProfile {
    pub dc: f64,
    #[serde(default)]
    pub step: Option<SourceStep>,
    #[serde(default)]
    pub sine: Option<SourceSine>,
}

impl SourceProfile {
    pub fn constant(dc: f64) -> Self {
        SourceProfile { dc, step: None, sine: None }
    }

    pub fn value(&self, t: Nanos, side: Side) -> f64 {
        let mut v = self.dc;
        if let Some(step) = &self.step {
            let active = match side {
                Side::Right => t >= step.at_ns,
                Side::Left => t > step.at_ns,
            };
            if active {
                v += step.delta;
            }
        }
        if let Some(sine) = &self.sine {
            v += sine.amplitude * (2.0 * PI * sine.freq_hz * seconds(t)).sin();
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridPorts {
    /// Load node voltage output (V).
    pub v_node: String,
    /// Source current output (A).
    #[serde(default)]
    pub i_source: Option<String>,
    /// Current injected into the load node (A), input.
    #[serde(default)]
    pub i_injection: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridModel {
    pub source: SourceProfile,
    pub rs: f64,
    #[serde(default)]
    pub ls: Option<f64>,
    pub rl: f64,
    /// Constant injection added to the input port, A.
    #[serde(default)]
    pub injection: f64,
    pub ports: GridPorts,
}

impl GridModel {
    pub fn resistive(vs: f64, rs: f64, rl: f64) -> Self {
        GridModel {
            source: SourceProfile::constant(vs),
            rs,
            ls: None,
            rl,
            injection: 0.0,
            ports: GridPorts {
                v_node: "grid.node.v".into(),
                i_source: Some("grid.source.i".into()),
                i_injection: Some("grid.node.i_inj".into()),
            },
        }
    }

    pub fn check(&self) -> Result<(), PlantError> {
        if !(self.rs > 0.0) || !(self.rl > 0.0) {
            return Err(PlantError::InvalidModel("grid requires rs > 0 and rl > 0".into()));
        }
        if let Some(ls) = self.ls {
            if !(ls > 0.0) {
                return Err(PlantError::InvalidModel("grid inductance must be positive".into()));
            }
        }
        Ok(())
    }

    fn output_rows(&self) -> usize {
        1 + usize::from(self.ports.i_source.is_some())
    }

    fn has_input(&self) -> bool {
        self.ports.i_injection.is_some()
    }

    /// Thevenin resistance seen from the load node.
    pub fn thevenin_resistance(&self) -> f64 {
        self.rs * self.rl / (self.rs + self.rl)
    }

    /// Thevenin voltage seen from the load node.
    pub fn thevenin_voltage(&self, t: Nanos, side: Side) -> f64 {
        self.source.value(t, side) * self.rl / (self.rs + self.rl)
    }
}

impl LinearModel for GridModel {
    fn state_space(&self) -> StateSpace {
        let m = usize::from(self.has_input());
        let (rs, rl) = (self.rs, self.rl);
        let full = match self.ls {
            Some(ls) => StateSpace {
                a: DMatrix::from_element(1, 1, -(rs + rl) / ls),
                b: DMatrix::from_element(1, m, -rl / ls),
                c: DMatrix::from_column_slice(2, 1, &[rl, 1.0]),
                d: DMatrix::from_column_slice(2, m, &[rl, 0.0][..2 * m]),
            },
            None => StateSpace {
                a: DMatrix::zeros(0, 0),
                b: DMatrix::zeros(0, m),
                c: DMatrix::zeros(2, 0),
                d: DMatrix::from_column_slice(2, m, &[rl * rs / (rs + rl), -rl / (rs + rl)][..2 * m]),
            },
        };
        let rows = self.output_rows();
        StateSpace { c: full.c.rows(0, rows).into_owned(), d: full.d.rows(0, rows).into_owned(), ..full }
    }

    fn forcing(&self, t: Nanos, side: Side) -> (DVector<f64>, DVector<f64>) {
        let vs = self.source.value(t, side);
        let (rs, rl, inj) = (self.rs, self.rl, self.injection);
        let (e, f) = match self.ls {
            Some(ls) => (DVector::from_element(1, (vs - rl * inj) / ls), DVector::from_column_slice(&[rl * inj, 0.0])),
            None => (
                DVector::zeros(0),
                DVector::from_column_slice(&[rl * (vs + rs * inj) / (rs + rl), (vs - rl * inj) / (rs + rl)]),
            ),
        };
        (e, f.rows(0, self.output_rows()).into_owned())
    }

    fn input_ports(&self) -> Vec<Port> {
        self.ports.i_injection.iter().map(|t| Port::new(t, "A")).collect()
    }

    fn output_ports(&self) -> Vec<Port> {
        let mut ports = vec![Port::new(&self.ports.v_node, "V")];
        if let Some(topic) = &self.ports.i_source {
            ports.push(Port::new(topic, "A"));
        }
        ports
    }

    fn initial_state(&self, u0: &DVector<f64>) -> DVector<f64> {
        match self.ls {
            Some(_) => {
                let inj = self.injection + u0.iter().sum::<f64>();
                let vs = self.source.value(0, Side::Right);
                DVector::from_element(1, (vs - self.rl * inj) / (self.rs + self.rl))
            }
            None => DVector::zeros(0),
        }
    }
}

/// Electrical state of a [`GridModel`] at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerState {
    pub node_voltage: f64,
    pub source_current: f64,
    pub inductor_current: Option<f64>,
    pub sim_time: Nanos,
}

impl PowerState {
    /// DC steady state at t = 0 with zero external injection.
    pub fn initial(model: &GridModel) -> Result<Self, PlantError> {
        model.check()?;
        let u0 = DVector::zeros(usize::from(model.has_input()));
        let x0 = model.initial_state(&u0);
        let tr = Trapezoid::new(model.state_space(), 1)?;
        let y = tr.output(model, &x0, 0, &u0, Side::Right)?;
        Ok(PowerState {
            node_voltage: y[0],
            source_current: source_current(model, &x0, y[0], 0, Side::Right),
            inductor_current: x0.get(0).copied(),
            sim_time: 0,
        })
    }
}

/// Output topics and SI values produced by one [`power_step`].
pub type Outputs = Vec<(String, f64)>;

/// Advances the circuit by one trapezoidal step of length `dt`, holding the
/// injection input constant over the step. Pure: the result depends only on
/// the arguments.
pub fn power_step(
    state: &PowerState,
    model: &GridModel,
    inputs: &[SignalSample],
    dt: Nanos,
) -> Result<(PowerState, Outputs), PlantError> {
    model.check()?;
    if dt == 0 {
        return Err(PlantError::InvalidModel("step must be positive".into()));
    }
    let u = match &model.ports.i_injection {
        Some(topic) => {
            let v = inputs.iter().rev().find(|s| &s.topic == topic).and_then(|s| s.value.as_real()).unwrap_or(0.0);
            DVector::from_element(1, v)
        }
        None => DVector::zeros(0),
    };
    let tr = Trapezoid::new(model.state_space(), dt)?;
    let x = match state.inductor_current {
        Some(i) if model.ls.is_some() => DVector::from_element(1, i),
        _ => model.initial_state(&u),
    };
    let x1 = tr.step(model, &x, state.sim_time, &u, &u)?;
    let t1 = state.sim_time + dt;
    let y = tr.output(model, &x1, t1, &u, Side::Left)?;
    let next = PowerState {
        node_voltage: y[0],
        source_current: source_current(model, &x1, y[0], t1, Side::Left),
        inductor_current: x1.get(0).copied(),
        sim_time: t1,
    };
    let mut outputs = vec![(model.ports.v_node.clone(), y[0])];
    if let Some(topic) = &model.ports.i_source {
        outputs.push((topic.clone(), y[1]));
    }
    Ok((next, outputs))
}

fn source_current(model: &GridModel, x: &DVector<f64>, v_node: f64, t: Nanos, side: Side) -> f64 {
    match x.get(0) {
        Some(i) => *i,
        None => (model.source.value(t, side) - v_node) / model.rs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::SignalSample;

    const MS: Nanos = 1_000_000;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn voltage_divider_steady_state() {
        let m = GridModel::resistive(400.0, 1.0, 10.0);
        let s0 = PowerState::initial(&m).unwrap();
        let (s1, out) = power_step(&s0, &m, &[], 10 * MS).unwrap();
        assert!(rel(s1.source_current, 400.0 / 11.0) < 1e-9);
        assert!(rel(s1.node_voltage, 4000.0 / 11.0) < 1e-9);
        assert_eq!(out[0].0, "grid.node.v");
    }

    #[test]
    fn zero_source_gives_zero_outputs() {
        let m = GridModel::resistive(0.0, 1.0, 10.0);
        let s0 = PowerState::initial(&m).unwrap();
        let (s1, out) = power_step(&s0, &m, &[], MS).unwrap();
        assert_eq!(s1.node_voltage, 0.0);
        assert!(out.iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn injection_superposition() {
        let m = GridModel::resistive(400.0, 1.0, 10.0);
        let s0 = PowerState::initial(&m).unwrap();
        let inj = SignalSample::real("grid.node.i_inj", 0, 10.0, "A", "der", 0);
        let (s1, _) = power_step(&s0, &m, &[inj], MS).unwrap();
        let rise = s1.node_voltage - 4000.0 / 11.0;
        assert!(rel(rise, 10.0 * 10.0 / 11.0) < 1e-9);
    }

    #[test]
    fn steady_state_energy_balance() {
        let mut m = GridModel::resistive(400.0, 1.0, 10.0);
        m.ls = Some(0.05);
        let mut s = PowerState::initial(&m).unwrap();
        for _ in 0..2000 {
            s = power_step(&s, &m, &[], MS).unwrap().0;
        }
        let p_source = 400.0 * s.source_current;
        let p_load = s.node_voltage * s.node_voltage / m.rl;
        let p_loss = s.source_current * s.source_current * m.rs;
        assert!(rel(p_source, p_load + p_loss) < 1e-9);
    }

    #[test]
    fn power_step_is_bitwise_deterministic() {
        let mut m = GridModel::resistive(400.0, 1.0, 10.0);
        m.ls = Some(0.02);
        m.source.step = Some(SourceStep { at_ns: 0, delta: -50.0 });
        let s0 = PowerState::initial(&m).unwrap();
        let inj = [SignalSample::real("grid.node.i_inj", 0, 3.25, "A", "der", 0)];
        let a = power_step(&s0, &m, &inj, MS).unwrap();
        let b = power_step(&s0, &m, &inj, MS).unwrap();
        assert_eq!(a.0.node_voltage.to_bits(), b.0.node_voltage.to_bits());
        assert_eq!(a.1, b.1);
    }

    #[test]
    fn rejects_non_positive_resistances() {
        let m = GridModel::resistive(400.0, 0.0, 10.0);
        assert!(PowerState::initial(&m).is_err());
    }

    #[test]
    fn step_profile_sides() {
        let p = SourceProfile { dc: 1.0, step: Some(SourceStep { at_ns: 5, delta: 1.0 }), sine: None };
        assert_eq!(p.value(5, Side::Right), 2.0);
        assert_eq!(p.value(5, Side::Left), 1.0);
        assert_eq!(p.value(6, Side::Left), 2.0);
    }
}
