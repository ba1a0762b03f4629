//! Runtime adapters that let the co-simulation master drive built-in models.
//!
//! A participant exchanges values in canonical units on canonical topics; the
//! adapter converts to and from the units its model computes in.

use std::any::Any;

use nalgebra::DVector;

use crate::experiment::ParticipantDescriptor;
use crate::model::{CanonicalModel, Nanos, UnitDef};
use crate::netem::link_seed;

use super::block::{LinearModel, Side, Trapezoid};
use super::hil::{HilDevice, PhilDevice, PhilDeviceState, PhilInterfaceConfig};
use super::ict::{ict_step, IctModel, IctSimulator, NetworkEvent};
use super::{ParticipantModel, PlantError};

/// Piecewise-linear waveform; constant beyond its end points.
#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    points: Vec<(Nanos, f64)>,
}

impl Track {
    pub fn constant(v: f64) -> Self {
        Track { points: vec![(0, v)] }
    }

    pub fn linear(t0: Nanos, v0: f64, t1: Nanos, v1: f64) -> Self {
        Self::from_points(vec![(t0, v0), (t1, v1)])
    }

    /// Points are sorted by time; later duplicates of a time win.
    pub fn from_points(mut points: Vec<(Nanos, f64)>) -> Self {
        points.sort_by_key(|(t, _)| *t);
        let mut dedup: Vec<(Nanos, f64)> = Vec::with_capacity(points.len());
        for p in points {
            match dedup.last_mut() {
                Some(last) if last.0 == p.0 => *last = p,
                _ => dedup.push(p),
            }
        }
        if dedup.is_empty() {
            dedup.push((0, 0.0));
        }
        Track { points: dedup }
    }

    pub fn points(&self) -> &[(Nanos, f64)] {
        &self.points
    }

    pub fn at(&self, t: Nanos) -> f64 {
        let pts = &self.points;
        match pts.binary_search_by_key(&t, |(pt, _)| *pt) {
            Ok(i) => pts[i].1,
            Err(0) => pts[0].1,
            Err(i) if i == pts.len() => pts[i - 1].1,
            Err(i) => {
                let (t0, v0) = pts[i - 1];
                let (t1, v1) = pts[i];
                let w = (t - t0) as f64 / (t1 - t0) as f64;
                v0 + (v1 - v0) * w
            }
        }
    }
}

pub type Snapshot = Box<dyn Any + Send>;

/// One federated actor as seen by the synchronization master.
pub trait Participant: Send {
    fn id(&self) -> &str;

    fn step_ns(&self) -> Nanos;

    /// Input topics, in the order of the `inputs` arguments below.
    fn input_topics(&self) -> Vec<String>;

    /// Output topics, in the order of returned values.
    fn output_topics(&self) -> Vec<String>;

    /// Resets to t = 0 and returns the initial outputs.
    fn initialize(&mut self, inputs: &[f64]) -> Result<Vec<f64>, PlantError>;

    /// Integrates from `from` to `to` with the given input waveforms and
    /// returns the outputs at `to`.
    fn advance(&mut self, from: Nanos, to: Nanos, inputs: &[Track]) -> Result<Vec<f64>, PlantError>;

    fn save(&self) -> Result<Snapshot, PlantError>;

    fn restore(&mut self, snapshot: &Snapshot) -> Result<(), PlantError>;
}

/// Unit conversion between two compatible registered units.
#[derive(Debug, Clone)]
pub struct Conv {
    from: UnitDef,
    to: UnitDef,
}

impl Conv {
    pub fn new(model: &CanonicalModel, from: &str, to: &str) -> Result<Conv, PlantError> {
        let f = model.unit(from).ok_or_else(|| PlantError::InvalidModel(format!("unit `{from}` is not registered")))?;
        let t = model.unit(to).ok_or_else(|| PlantError::InvalidModel(format!("unit `{to}` is not registered")))?;
        if !f.compatible_with(t) {
            return Err(PlantError::InvalidModel(format!("cannot convert {from} to {to}")));
        }
        Ok(Conv { from: f.clone(), to: t.clone() })
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.from.symbol == self.to.symbol {
            x
        } else {
            self.to.from_base(self.from.to_base(x))
        }
    }
}

fn entry_unit(model: &CanonicalModel, topic: &str) -> Result<String, PlantError> {
    model.entry_unit(topic).map(|u| u.symbol.clone()).map_err(|e| PlantError::InvalidModel(e.to_string()))
}

fn check_span(from: Nanos, to: Nanos, step: Nanos, now: Nanos) -> Result<u64, PlantError> {
    if from != now {
        return Err(PlantError::Fault(format!("advance from {from} but participant is at {now}")));
    }
    if to <= from || (to - from) % step != 0 {
        return Err(PlantError::Fault(format!("span {from}..{to} is not a multiple of step {step}")));
    }
    Ok((to - from) / step)
}

/// Any [`LinearModel`] integrated with the trapezoidal rule.
pub struct BlockParticipant {
    id: String,
    step: Nanos,
    model: Box<dyn LinearModel>,
    tr: Trapezoid,
    x: DVector<f64>,
    t: Nanos,
    inputs: Vec<String>,
    outputs: Vec<String>,
    in_conv: Vec<Conv>,
    out_conv: Vec<Conv>,
}

impl BlockParticipant {
    pub fn new(
        id: &str,
        step: Nanos,
        model: Box<dyn LinearModel>,
        canonical: &CanonicalModel,
    ) -> Result<Self, PlantError> {
        let tr = Trapezoid::new(model.state_space(), step)?;
        let mut inputs = Vec::new();
        let mut in_conv = Vec::new();
        for p in model.input_ports() {
            in_conv.push(Conv::new(canonical, &entry_unit(canonical, &p.topic)?, &p.unit)?);
            inputs.push(p.topic);
        }
        let mut outputs = Vec::new();
        let mut out_conv = Vec::new();
        for p in model.output_ports() {
            out_conv.push(Conv::new(canonical, &p.unit, &entry_unit(canonical, &p.topic)?)?);
            outputs.push(p.topic);
        }
        let x = DVector::zeros(tr.state_space().states());
        Ok(BlockParticipant { id: id.to_string(), step, model, tr, x, t: 0, inputs, outputs, in_conv, out_conv })
    }

    fn port_inputs(&self, tracks: &[Track], t: Nanos) -> DVector<f64> {
        DVector::from_iterator(self.in_conv.len(), self.in_conv.iter().zip(tracks).map(|(c, tr)| c.apply(tr.at(t))))
    }

    fn canonical_outputs(&self, y: &DVector<f64>) -> Vec<f64> {
        self.out_conv.iter().zip(y.iter()).map(|(c, v)| c.apply(*v)).collect()
    }
}

impl Participant for BlockParticipant {
    fn id(&self) -> &str {
        &self.id
    }

    fn step_ns(&self) -> Nanos {
        self.step
    }

    fn input_topics(&self) -> Vec<String> {
        self.inputs.clone()
    }

    fn output_topics(&self) -> Vec<String> {
        self.outputs.clone()
    }

    fn initialize(&mut self, inputs: &[f64]) -> Result<Vec<f64>, PlantError> {
        let tracks: Vec<Track> = inputs.iter().map(|v| Track::constant(*v)).collect();
        let u = self.port_inputs(&tracks, 0);
        self.x = self.model.initial_state(&u);
        self.t = 0;
        let y = self.tr.output(self.model.as_ref(), &self.x, 0, &u, Side::Right)?;
        Ok(self.canonical_outputs(&y))
    }

    fn advance(&mut self, from: Nanos, to: Nanos, inputs: &[Track]) -> Result<Vec<f64>, PlantError> {
        let n = check_span(from, to, self.step, self.t)?;
        let mut t = from;
        for _ in 0..n {
            let u0 = self.port_inputs(inputs, t);
            let u1 = self.port_inputs(inputs, t + self.step);
            self.x = self.tr.step(self.model.as_ref(), &self.x, t, &u0, &u1)?;
            t += self.step;
        }
        self.t = to;
        let u = self.port_inputs(inputs, to);
        let y = self.tr.output(self.model.as_ref(), &self.x, to, &u, Side::Right)?;
        Ok(self.canonical_outputs(&y))
    }

    fn save(&self) -> Result<Snapshot, PlantError> {
        Ok(Box::new((self.x.clone(), self.t)))
    }

    fn restore(&mut self, snapshot: &Snapshot) -> Result<(), PlantError> {
        let (x, t) = snapshot
            .downcast_ref::<(DVector<f64>, Nanos)>()
            .ok_or_else(|| PlantError::Fault("foreign snapshot".into()))?;
        self.x = x.clone();
        self.t = *t;
        Ok(())
    }
}

/// Discrete-event network participant relaying inputs to outputs.
pub struct IctParticipant {
    id: String,
    step: Nanos,
    model: IctModel,
    sim: IctSimulator,
    latest: Vec<f64>,
    t: Nanos,
    seq: u64,
    conv: Vec<Conv>,
}

const ICT_LINK: &str = "relay";

impl IctParticipant {
    pub fn new(
        id: &str,
        step: Nanos,
        model: IctModel,
        canonical: &CanonicalModel,
        seed: u64,
    ) -> Result<Self, PlantError> {
        let link = model.link.to_model(link_seed(seed, &format!("ict:{id}")));
        let mut conv = Vec::new();
        for r in &model.relays {
            conv.push(Conv::new(canonical, &entry_unit(canonical, &r.input)?, &entry_unit(canonical, &r.output)?)?);
        }
        let n = model.relays.len();
        Ok(IctParticipant {
            id: id.to_string(),
            step,
            model,
            sim: IctSimulator::new([(ICT_LINK.to_string(), link)]),
            latest: vec![0.0; n],
            t: 0,
            seq: 0,
            conv,
        })
    }

    fn absorb(&mut self, delivered: Vec<NetworkEvent>) {
        for ev in delivered {
            if let Some(i) = self.model.relays.iter().position(|r| r.input == ev.payload.topic) {
                if let Some(v) = ev.payload.value.as_real() {
                    self.latest[i] = self.conv[i].apply(v);
                }
            }
        }
    }
}

impl Participant for IctParticipant {
    fn id(&self) -> &str {
        &self.id
    }

    fn step_ns(&self) -> Nanos {
        self.step
    }

    fn input_topics(&self) -> Vec<String> {
        self.model.relays.iter().map(|r| r.input.clone()).collect()
    }

    fn output_topics(&self) -> Vec<String> {
        self.model.relays.iter().map(|r| r.output.clone()).collect()
    }

    fn initialize(&mut self, inputs: &[f64]) -> Result<Vec<f64>, PlantError> {
        self.latest = inputs.iter().zip(&self.conv).map(|(v, c)| c.apply(*v)).collect();
        self.t = 0;
        Ok(self.latest.clone())
    }

    fn advance(&mut self, from: Nanos, to: Nanos, inputs: &[Track]) -> Result<Vec<f64>, PlantError> {
        let n = check_span(from, to, self.step, self.t)?;
        let mut t = from;
        for _ in 0..n {
            let mut events = Vec::new();
            for (r, tr) in self.model.relays.iter().zip(inputs) {
                let s = crate::model::SignalSample::real(&r.input, t, tr.at(t), &self.model.unit, &self.id, self.seq);
                events.push(NetworkEvent::new(s, t, ICT_LINK));
            }
            self.seq += 1;
            let delivered = ict_step(&mut self.sim, t, events)?;
            self.absorb(delivered);
            t += self.step;
        }
        let delivered = ict_step(&mut self.sim, to, Vec::new())?;
        self.absorb(delivered);
        self.t = to;
        Ok(self.latest.clone())
    }

    fn save(&self) -> Result<Snapshot, PlantError> {
        Ok(Box::new((self.sim.clone(), self.latest.clone(), self.t, self.seq)))
    }

    fn restore(&mut self, snapshot: &Snapshot) -> Result<(), PlantError> {
        let (sim, latest, t, seq) = snapshot
            .downcast_ref::<(IctSimulator, Vec<f64>, Nanos, u64)>()
            .ok_or_else(|| PlantError::Fault("foreign snapshot".into()))?;
        self.sim = sim.clone();
        self.latest = latest.clone();
        self.t = *t;
        self.seq = *seq;
        Ok(())
    }
}

/// Emulated P-HIL device driven by the co-simulation master.
pub struct PhilParticipant {
    id: String,
    step: Nanos,
    device: PhilDevice,
    iface: PhilInterfaceConfig,
    state: PhilDeviceState,
    input: String,
    output: String,
    in_conv: Conv,
    out_conv: Conv,
    t: Nanos,
}

impl Participant for PhilParticipant {
    fn id(&self) -> &str {
        &self.id
    }

    fn step_ns(&self) -> Nanos {
        self.step
    }

    fn input_topics(&self) -> Vec<String> {
        vec![self.input.clone()]
    }

    fn output_topics(&self) -> Vec<String> {
        vec![self.output.clone()]
    }

    fn initialize(&mut self, inputs: &[f64]) -> Result<Vec<f64>, PlantError> {
        let v0 = self.in_conv.apply(inputs.first().copied().unwrap_or(0.0));
        self.state = PhilDeviceState::at_voltage(&self.device, &self.iface, v0);
        self.t = 0;
        Ok(vec![self.out_conv.apply(self.iface.sensor_gain * self.state.current())])
    }

    fn advance(&mut self, from: Nanos, to: Nanos, inputs: &[Track]) -> Result<Vec<f64>, PlantError> {
        let n = check_span(from, to, self.step, self.t)?;
        let mut i_meas = self.iface.sensor_gain * self.state.current();
        let mut t = from;
        for _ in 0..n {
            let v = self.in_conv.apply(inputs.first().map_or(0.0, |tr| tr.at(t)));
            i_meas = self.state.step(&self.device, &self.iface, v, self.step);
            super::block::check_finite([i_meas].iter())?;
            t += self.step;
        }
        self.t = to;
        Ok(vec![self.out_conv.apply(i_meas)])
    }

    fn save(&self) -> Result<Snapshot, PlantError> {
        Ok(Box::new((self.state.clone(), self.t)))
    }

    fn restore(&mut self, snapshot: &Snapshot) -> Result<(), PlantError> {
        let (s, t) = snapshot
            .downcast_ref::<(PhilDeviceState, Nanos)>()
            .ok_or_else(|| PlantError::Fault("foreign snapshot".into()))?;
        self.state = s.clone();
        self.t = *t;
        Ok(())
    }
}

/// Builds the runtime adapter of a participant with a built-in model.
/// `seed` is the experiment seed (used by network models).
pub fn build_participant(
    desc: &ParticipantDescriptor,
    canonical: &CanonicalModel,
    seed: u64,
) -> Result<Box<dyn Participant>, PlantError> {
    let model = desc
        .model
        .as_ref()
        .ok_or_else(|| PlantError::UnsupportedTopology(format!("`{}` has no built-in model", desc.id)))?;
    model.check()?;
    let step = desc.step_ns;
    Ok(match model {
        ParticipantModel::Grid(m) => Box::new(BlockParticipant::new(&desc.id, step, Box::new(m.clone()), canonical)?),
        ParticipantModel::Der(m) => Box::new(BlockParticipant::new(&desc.id, step, Box::new(m.clone()), canonical)?),
        ParticipantModel::Linear(m) => Box::new(BlockParticipant::new(&desc.id, step, Box::new(m.clone()), canonical)?),
        ParticipantModel::Controller(m) => {
            Box::new(BlockParticipant::new(&desc.id, step, Box::new(m.clone()), canonical)?)
        }
        ParticipantModel::Ict(m) => Box::new(IctParticipant::new(&desc.id, step, m.clone(), canonical, seed)?),
        ParticipantModel::Hil(h) => match &h.device {
            HilDevice::Chil(pi) => Box::new(BlockParticipant::new(&desc.id, step, Box::new(pi.clone()), canonical)?),
            HilDevice::Phil(device) => {
                let ports = h.ports.as_ref().expect("checked by HilModel::check");
                Box::new(PhilParticipant {
                    id: desc.id.clone(),
                    step,
                    device: device.clone(),
                    iface: h.interface.clone(),
                    state: PhilDeviceState::at_voltage(device, &h.interface, 0.0),
                    input: ports.v_ref.clone(),
                    output: ports.i_meas.clone(),
                    in_conv: Conv::new(canonical, &entry_unit(canonical, &ports.v_ref)?, "V")?,
                    out_conv: Conv::new(canonical, "A", &entry_unit(canonical, &ports.i_meas)?)?,
                    t: 0,
                })
            }
        },
    })
}
