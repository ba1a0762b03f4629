//! Emulated hardware-in-the-loop devices.
//!
//! P-HIL uses the ideal transformer method: the simulator sends its node
//! voltage as `v_ref`, the amplifier reproduces it after a transport delay and
//! a first-order lag, the device draws a current, and the sensed current is
//! injected back into the simulation as a current source. C-HIL exchanges
//! signals only.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::model::{Nanos, SignalSample};
use crate::netem::{LinkModel, LinkScheduler, ScheduleOutcome};

use super::block::{check_finite, seconds, Side};
use super::grid::SourceProfile;
use super::linear::PiController;
use super::PlantError;

fn default_tau_a() -> Nanos {
    1_000_000
}

fn one_step() -> u32 {
    1
}

fn unity() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InterfaceScheme {
    #[default]
    IdealTransformer,
}

/// Amplifier and sensor of the power interface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhilInterfaceConfig {
    /// Amplifier lag time constant; 0 disables the lag.
    #[serde(default = "default_tau_a")]
    pub tau_a_ns: Nanos,
    /// Loop transport delay in device steps, at least 1.
    #[serde(default = "one_step")]
    pub delay_steps: u32,
    #[serde(default = "unity")]
    pub sensor_gain: f64,
    #[serde(default)]
    pub scheme: InterfaceScheme,
}

impl Default for PhilInterfaceConfig {
    fn default() -> Self {
        PhilInterfaceConfig {
            tau_a_ns: default_tau_a(),
            delay_steps: 1,
            sensor_gain: 1.0,
            scheme: InterfaceScheme::IdealTransformer,
        }
    }
}

impl PhilInterfaceConfig {
    pub fn pure_delay(delay_steps: u32) -> Self {
        PhilInterfaceConfig { tau_a_ns: 0, delay_steps, ..Self::default() }
    }

    pub fn check(&self) -> Result<(), PlantError> {
        if self.delay_steps < 1 {
            return Err(PlantError::InvalidModel("interface delay must be at least one step".into()));
        }
        if !self.sensor_gain.is_finite() {
            return Err(PlantError::InvalidModel("sensor gain must be finite".into()));
        }
        Ok(())
    }
}

/// Resistive or RL load behind the amplifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhilDevice {
    pub rh: f64,
    #[serde(default)]
    pub lh: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum HilDevice {
    Phil(PhilDevice),
    Chil(PiController),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhilPorts {
    /// Voltage reference from the simulator, input (V).
    pub v_ref: String,
    /// Sensed device current, output (A).
    pub i_meas: String,
}

/// HIL participant configuration as written under `participants[].model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HilModel {
    pub device: HilDevice,
    #[serde(default)]
    pub interface: PhilInterfaceConfig,
    /// Required in phil mode; chil mode uses the controller's ports.
    #[serde(default)]
    pub ports: Option<PhilPorts>,
}

impl HilModel {
    pub fn check(&self) -> Result<(), PlantError> {
        self.interface.check()?;
        match &self.device {
            HilDevice::Phil(d) => {
                check_device(d)?;
                if self.ports.is_none() {
                    return Err(PlantError::InvalidModel("phil device needs v_ref/i_meas ports".into()));
                }
                Ok(())
            }
            HilDevice::Chil(pi) => pi.check(),
        }
    }
}

fn check_device(d: &PhilDevice) -> Result<(), PlantError> {
    if !(d.rh > 0.0) {
        return Err(PlantError::InvalidModel("phil device requires rh > 0".into()));
    }
    if let Some(lh) = d.lh {
        if !(lh > 0.0) {
            return Err(PlantError::InvalidModel("phil device inductance must be positive".into()));
        }
    }
    Ok(())
}

/// Device side of the power interface: delay line, amplifier lag, load, sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PhilDeviceState {
    line: VecDeque<f64>,
    v_amp: f64,
    current: f64,
}

impl PhilDeviceState {
    /// Device at rest at voltage `v0`.
    pub fn at_voltage(device: &PhilDevice, iface: &PhilInterfaceConfig, v0: f64) -> Self {
        let extra = iface.delay_steps.saturating_sub(1) as usize;
        PhilDeviceState { line: std::iter::repeat(v0).take(extra).collect(), v_amp: v0, current: v0 / device.rh }
    }

    pub fn current(&self) -> f64 {
        self.current
    }

    /// Consumes one `v_ref` sample and returns the sensed current.
    pub fn step(&mut self, device: &PhilDevice, iface: &PhilInterfaceConfig, v_ref: f64, h: Nanos) -> f64 {
        let hs = seconds(h);
        self.line.push_back(v_ref);
        let extra = iface.delay_steps.saturating_sub(1) as usize;
        let v_in = if self.line.len() > extra { self.line.pop_front().unwrap_or(v_ref) } else { self.v_amp };
        let alpha = if iface.tau_a_ns == 0 { 1.0 } else { 1.0 - (-hs / seconds(iface.tau_a_ns)).exp() };
        self.v_amp += alpha * (v_in - self.v_amp);
        self.current = match device.lh {
            None => self.v_amp / device.rh,
            Some(lh) => {
                let beta = 1.0 - (-hs * device.rh / lh).exp();
                self.current + beta * (self.v_amp / device.rh - self.current)
            }
        };
        iface.sensor_gain * self.current
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Stable,
    Unstable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stability {
    pub loop_gain: f64,
    pub verdict: Verdict,
}

/// Resistive ideal-transformer loop under pure delay: the coupling error obeys
/// `e[k] = −(Rs/Rh)·e[k−d]`, so it decays iff `Rs/Rh < 1`. A gain of exactly
/// one never decays and is classified unstable.
pub fn itm_stability(rs: f64, rh: f64, delay_steps: u32) -> Result<Stability, PlantError> {
    if !(rs > 0.0) || !(rh > 0.0) || delay_steps < 1 {
        return Err(PlantError::InvalidModel("itm_stability requires rs, rh > 0 and delay >= 1".into()));
    }
    let loop_gain = rs / rh;
    let verdict = if loop_gain < 1.0 { Verdict::Stable } else { Verdict::Unstable };
    Ok(Stability { loop_gain, verdict })
}

/// Simulator side of an ideal-transformer loop: Thevenin source behind `rs`.
#[derive(Debug, Clone, PartialEq)]
pub struct ItmCoupling {
    pub rs: f64,
    pub source: SourceProfile,
}

impl ItmCoupling {
    /// Node voltage with the device connected directly (no interface).
    pub fn ideal_voltage(&self, device: &PhilDevice, t: Nanos) -> f64 {
        self.source.value(t, Side::Right) * device.rh / (self.rs + device.rh)
    }
}

/// Network between simulator and device, one model per direction.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopLinks {
    pub to_device: LinkModel,
    pub to_simulator: LinkModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HilRunOptions {
    pub step_ns: Nanos,
    pub steps: usize,
    pub deadline_ns: Nanos,
    /// Pace the device loop on the wall clock.
    pub pace: bool,
    /// `None` for a local (intra-platform) loop.
    pub links: Option<LoopLinks>,
    /// Start at the zero-delay steady state instead of a de-energized device.
    pub start_at_ideal: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeadlineRow {
    pub step_index: u64,
    pub budget_ns: Nanos,
    pub actual_ns: Nanos,
    pub missed: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DeadlineReport {
    pub rows: Vec<DeadlineRow>,
}

impl DeadlineReport {
    pub fn misses(&self) -> usize {
        self.rows.iter().filter(|r| r.missed).count()
    }

    pub fn push(&mut self, step_index: u64, budget_ns: Nanos, actual_ns: Nanos) {
        self.rows.push(DeadlineRow { step_index, budget_ns, actual_ns, missed: actual_ns > budget_ns });
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["step_index", "budget_ns", "actual_ns", "missed"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.step_index.to_string(),
                r.budget_ns.to_string(),
                r.actual_ns.to_string(),
                r.missed.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("csv is utf-8")
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct HilRunResult {
    /// Exchanged samples (`v_ref` and `i_meas` for phil, controller output for chil).
    pub samples: Vec<SignalSample>,
    pub report: DeadlineReport,
    /// Simulator-side node voltage per step (phil).
    pub v_sim: Vec<f64>,
    /// Zero-delay reference voltage per step (phil).
    pub v_ideal: Vec<f64>,
}

impl HilRunResult {
    pub fn tracking_linf(&self) -> f64 {
        self.v_sim.iter().zip(&self.v_ideal).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// What the device is coupled to.
#[derive(Debug, Clone, PartialEq)]
pub enum Coupling {
    /// Closed ideal-transformer loop with a simulated Thevenin source.
    Itm(ItmCoupling),
    /// Measurement samples fed to a C-HIL controller, one per step.
    Signals(Vec<f64>),
}

struct Channel {
    sched: Option<LinkScheduler>,
    pending: Vec<(Nanos, f64)>,
    latest: Option<f64>,
}

impl Channel {
    fn new(model: Option<&LinkModel>) -> Self {
        Channel { sched: model.cloned().map(LinkScheduler::new), pending: Vec::new(), latest: None }
    }

    /// Returns the one-way delay, `None` if the message was lost.
    fn send(&mut self, value: f64, now: Nanos) -> Option<Nanos> {
        match &mut self.sched {
            None => {
                self.pending.push((now, value));
                Some(0)
            }
            Some(s) => match s.schedule(now) {
                ScheduleOutcome::Delivery(d) => {
                    self.pending.push((d.deliver_time, value));
                    Some(d.deliver_time - now)
                }
                ScheduleOutcome::Dropped { .. } => None,
            },
        }
    }

    /// Latest-arrived value at `now` (zero-order hold).
    fn receive(&mut self, now: Nanos) -> Option<f64> {
        let mut arrived: Vec<(Nanos, f64)> = Vec::new();
        self.pending.retain(|&(t, v)| {
            if t <= now {
                arrived.push((t, v));
                false
            } else {
                true
            }
        });
        arrived.sort_by_key(|(t, _)| *t);
        if let Some((_, v)) = arrived.last() {
            self.latest = Some(*v);
        }
        self.latest
    }

    fn worst_case(&self) -> Nanos {
        self.sched.as_ref().map_or(0, |s| s.model().worst_case_delay())
    }
}

/// Runs a HIL device loop for `opts.steps` steps and accounts its deadlines.
///
/// A step's actual time is its wall-clock execution time plus the in-loop
/// network round trip; a lost message counts as the link's worst case.
pub fn hil_run(model: &HilModel, coupling: &Coupling, opts: &HilRunOptions) -> Result<HilRunResult, PlantError> {
    model.check()?;
    if opts.step_ns == 0 {
        return Err(PlantError::InvalidModel("hil step must be positive".into()));
    }
    match (&model.device, coupling) {
        (HilDevice::Phil(device), Coupling::Itm(itm)) => run_phil(model, device, itm, opts),
        (HilDevice::Chil(pi), Coupling::Signals(meas)) => run_chil(pi, meas, opts),
        _ => Err(PlantError::InvalidModel("phil needs an itm coupling, chil a signal coupling".into())),
    }
}

fn pace(start: Instant, k: usize, step: Nanos) {
    let due = start + Duration::from_nanos(step.saturating_mul(k as u64));
    let now = Instant::now();
    if due > now {
        std::thread::sleep(due - now);
    }
}

fn run_phil(
    model: &HilModel,
    device: &PhilDevice,
    itm: &ItmCoupling,
    opts: &HilRunOptions,
) -> Result<HilRunResult, PlantError> {
    match phil_loop(model, device, itm, opts) {
        (r, None) => Ok(r),
        (_, Some((_, v))) => Err(PlantError::NumericalOverflow(v)),
    }
}

/// The loop itself; stops at the first non-finite or overflowing value and
/// returns its step index and magnitude.
fn phil_loop(
    model: &HilModel,
    device: &PhilDevice,
    itm: &ItmCoupling,
    opts: &HilRunOptions,
) -> (HilRunResult, Option<(usize, f64)>) {
    let iface = &model.interface;
    let ports = model.ports.as_ref().expect("checked");
    let h = opts.step_ns;
    let (fwd, back) = match &opts.links {
        Some(l) => (Some(&l.to_device), Some(&l.to_simulator)),
        None => (None, None),
    };
    let mut to_dev = Channel::new(fwd);
    let mut to_sim = Channel::new(back);

    let v0 = if opts.start_at_ideal { itm.ideal_voltage(device, 0) } else { 0.0 };
    let mut dev = PhilDeviceState::at_voltage(device, iface, v0);
    let i0 = iface.sensor_gain * dev.current();
    to_sim.latest = Some(i0);
    to_dev.latest = Some(v0);

    let mut out = HilRunResult::default();
    let start = Instant::now();
    for k in 0..opts.steps {
        if opts.pace {
            pace(start, k, h);
        }
        let t = h * k as u64;
        let began = Instant::now();
        let i_avail = to_sim.receive(t).unwrap_or(0.0);
        let v = itm.source.value(t, Side::Right) - itm.rs * i_avail;
        if check_finite([v].iter()).is_err() {
            return (out, Some((k, v)));
        }
        let d_fwd = to_dev.send(v, t);
        let v_ref = to_dev.receive(t).unwrap_or(v0);
        let i_meas = dev.step(device, iface, v_ref, h);
        if check_finite([i_meas].iter()).is_err() {
            return (out, Some((k, i_meas)));
        }
        let d_back = to_sim.send(i_meas, t);
        let exec = began.elapsed().as_nanos() as Nanos;

        let rtt = d_fwd.unwrap_or(2 * to_dev.worst_case()) + d_back.unwrap_or(2 * to_sim.worst_case());
        out.report.push(k as u64, opts.deadline_ns, exec + rtt);
        out.v_sim.push(v);
        out.v_ideal.push(itm.ideal_voltage(device, t));
        out.samples.push(SignalSample::real(&ports.v_ref, t, v, "V", "simulator", k as u64));
        out.samples.push(SignalSample::real(&ports.i_meas, t, i_meas, "A", "device", k as u64));
    }
    (out, None)
}

fn run_chil(pi: &PiController, meas: &[f64], opts: &HilRunOptions) -> Result<HilRunResult, PlantError> {
    let hs = seconds(opts.step_ns);
    let mut integral = 0.0;
    let mut prev_err: Option<f64> = None;
    let mut out = HilRunResult::default();
    let start = Instant::now();
    for (k, m) in meas.iter().take(opts.steps).enumerate() {
        if opts.pace {
            pace(start, k, opts.step_ns);
        }
        let began = Instant::now();
        let err = pi.reference - m;
        if let Some(p) = prev_err {
            integral += pi.ki * hs * (p + err) / 2.0;
        }
        prev_err = Some(err);
        let y = pi.output_for(err, integral);
        check_finite([y].iter())?;
        let exec = began.elapsed().as_nanos() as Nanos;
        out.report.push(k as u64, opts.deadline_ns, exec);
        out.samples.push(SignalSample::real(
            &pi.ports.output,
            opts.step_ns * k as u64,
            y,
            &pi.ports.output_unit,
            "controller",
            k as u64,
        ));
    }
    Ok(out)
}

/// Outcome of a simulated ideal-transformer loop.
#[derive(Debug, Clone, PartialEq)]
pub enum LoopOutcome {
    /// Magnitude exceeded the overflow limit at this step.
    Overflow { step: usize },
    /// Ran to completion; coupling error `v − v_ideal` per step.
    Bounded { errors: Vec<f64> },
}

/// Local ideal-transformer loop without pacing, starting from a de-energized
/// device, for stability checks. Overflow is reported as an outcome.
pub fn simulate_itm_loop(
    rs: f64,
    device: &PhilDevice,
    iface: &PhilInterfaceConfig,
    vs: f64,
    step_ns: Nanos,
    steps: usize,
) -> Result<LoopOutcome, PlantError> {
    let model = HilModel {
        device: HilDevice::Phil(device.clone()),
        interface: iface.clone(),
        ports: Some(PhilPorts { v_ref: "hil.v_ref".into(), i_meas: "hil.i_meas".into() }),
    };
    let coupling = ItmCoupling { rs, source: SourceProfile::constant(vs) };
    let opts =
        HilRunOptions { step_ns, steps, deadline_ns: Nanos::MAX, pace: false, links: None, start_at_ideal: false };
    model.check()?;
    Ok(match phil_loop(&model, device, &coupling, &opts) {
        (r, None) => LoopOutcome::Bounded { errors: r.v_sim.iter().zip(&r.v_ideal).map(|(a, b)| a - b).collect() },
        (_, Some((step, _))) => LoopOutcome::Overflow { step },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn phil(rh: f64) -> HilModel {
        HilModel {
            device: HilDevice::Phil(PhilDevice { rh, lh: None }),
            interface: PhilInterfaceConfig::default(),
            ports: Some(PhilPorts { v_ref: "a.hil.v".into(), i_meas: "a.hil.i".into() }),
        }
    }

    #[test]
    fn verdict_boundary_is_unstable() {
        assert_eq!(itm_stability(5.0, 10.0, 1).unwrap().verdict, Verdict::Stable);
        assert_eq!(itm_stability(20.0, 10.0, 1).unwrap().loop_gain, 2.0);
        assert_eq!(itm_stability(10.0, 10.0, 3).unwrap().verdict, Verdict::Unstable);
        assert!(itm_stability(0.0, 10.0, 1).is_err());
        assert!(itm_stability(1.0, 10.0, 0).is_err());
    }

    #[test]
    fn pure_delay_error_alternates_with_gain_ratio() {
        let dev = PhilDevice { rh: 10.0, lh: None };
        let out = simulate_itm_loop(5.0, &dev, &PhilInterfaceConfig::pure_delay(1), 400.0, 100_000, 30).unwrap();
        let LoopOutcome::Bounded { errors } = out else { panic!("expected bounded") };
        for w in errors.windows(2).take(20) {
            assert!((w[1] / w[0] + 0.5).abs() < 1e-9);
        }
    }

    #[test]
    fn gain_two_overflows_within_100_steps() {
        let dev = PhilDevice { rh: 10.0, lh: None };
        let out = simulate_itm_loop(20.0, &dev, &PhilInterfaceConfig::pure_delay(1), 400.0, 100_000, 100).unwrap();
        assert!(matches!(out, LoopOutcome::Overflow { step } if step < 100));
    }

    #[test]
    fn marginal_gain_neither_decays_nor_overflows() {
        let dev = PhilDevice { rh: 10.0, lh: None };
        let out = simulate_itm_loop(10.0, &dev, &PhilInterfaceConfig::pure_delay(2), 400.0, 100_000, 1000).unwrap();
        let LoopOutcome::Bounded { errors } = out else { panic!("expected bounded") };
        let first = errors[0].abs();
        assert!(first > 0.0);
        assert!((errors[errors.len() - 1].abs() - first).abs() < 1e-6 * first);
    }

    #[test]
    fn local_loop_starting_at_ideal_stays_there_for_dc() {
        let mut m = phil(10.0);
        m.interface = PhilInterfaceConfig::pure_delay(1);
        let coupling = Coupling::Itm(ItmCoupling { rs: 5.0, source: SourceProfile::constant(300.0) });
        let opts = HilRunOptions {
            step_ns: 1_000_000,
            steps: 50,
            deadline_ns: 10_000_000,
            pace: false,
            links: None,
            start_at_ideal: true,
        };
        let r = hil_run(&m, &coupling, &opts).unwrap();
        assert!(r.tracking_linf() < 1e-9);
        assert_eq!(r.report.misses(), 0);
        assert_eq!(r.report.rows.len(), 50);
    }

    #[test]
    fn chil_zero_error_gives_zero_correction() {
        let pi = PiController {
            kp: 3.0,
            ki: 7.0,
            reference: 50.0,
            bias: 0.0,
            ports: crate::plant::linear::PiPorts {
                measurement: "a.f".into(),
                output: "a.p".into(),
                measurement_unit: "1".into(),
                output_unit: "1".into(),
            },
        };
        let m = HilModel { device: HilDevice::Chil(pi), interface: PhilInterfaceConfig::default(), ports: None };
        let opts = HilRunOptions {
            step_ns: 1_000_000,
            steps: 100,
            deadline_ns: 10_000_000,
            pace: false,
            links: None,
            start_at_ideal: false,
        };
        let r = hil_run(&m, &Coupling::Signals(vec![50.0; 100]), &opts).unwrap();
        assert!(r.samples.iter().all(|s| s.value.as_real() == Some(0.0)));
    }

    #[test]
    fn deadline_csv_header() {
        let mut rep = DeadlineReport::default();
        rep.push(0, 10, 11);
        assert_eq!(rep.to_csv(), "step_index,budget_ns,actual_ns,missed\n0,10,11,true\n");
    }
}
