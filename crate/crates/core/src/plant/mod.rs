//! Built-in participants and the monolithic reference solver.

pub mod block;
pub mod der;
pub mod grid;
pub mod hil;
pub mod ict;
pub mod linear;
pub mod oracle;
pub mod participant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use block::{LinearModel, Port, Side, StateSpace, Trapezoid};
pub use der::{DerModel, DerPorts};
pub use grid::{power_step, GridModel, GridPorts, PowerState, SourceProfile, SourceSine, SourceStep};
pub use hil::{
    hil_run, itm_stability, Coupling, DeadlineReport, DeadlineRow, HilDevice, HilModel, HilRunOptions, HilRunResult,
    ItmCoupling, LoopLinks, PhilDevice, PhilInterfaceConfig, PhilPorts, Stability, Verdict,
};
pub use ict::{ict_step, IctModel, IctSimulator, NetworkEvent, Relay};
pub use linear::{LinearSystemModel, PiController, PiPorts};
pub use oracle::{monolithic_oracle, OracleOptions, OracleTrace};
pub use participant::{build_participant, Participant, Snapshot, Track};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("invalid model: {0}")]
    InvalidModel(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("numerical overflow: magnitude {0:e} exceeds limit")]
    NumericalOverflow(f64),
    #[error("unsupported topology: {0}")]
    UnsupportedTopology(String),
    #[error("participant fault: {0}")]
    Fault(String),
    /// A remote participant did not answer within the watchdog.
    #[error("watchdog expired: {0}")]
    Timeout(String),
}

/// Participant model as configured under `participants[].model`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ParticipantModel {
    Grid(GridModel),
    Der(DerModel),
    Linear(LinearSystemModel),
    Controller(PiController),
    Ict(IctModel),
    Hil(HilModel),
}

impl ParticipantModel {
    pub fn check(&self) -> Result<(), PlantError> {
        match self {
            ParticipantModel::Grid(m) => m.check(),
            ParticipantModel::Der(m) => m.check(),
            ParticipantModel::Linear(m) => m.check(),
            ParticipantModel::Controller(m) => m.check(),
            ParticipantModel::Ict(m) => m.check(),
            ParticipantModel::Hil(m) => m.check(),
        }
    }

    pub fn type_name(&self) -> &'static str {
        match self {
            ParticipantModel::Grid(_) => "grid",
            ParticipantModel::Der(_) => "der",
            ParticipantModel::Linear(_) => "linear",
            ParticipantModel::Controller(_) => "controller",
            ParticipantModel::Ict(_) => "ict",
            ParticipantModel::Hil(_) => "hil",
        }
    }

    /// The state-space block, for models the monolithic solver can assemble.
    pub fn linear(&self) -> Option<&dyn LinearModel> {
        match self {
            ParticipantModel::Grid(m) => Some(m),
            ParticipantModel::Der(m) => Some(m),
            ParticipantModel::Linear(m) => Some(m),
            ParticipantModel::Controller(m) => Some(m),
            ParticipantModel::Ict(_) | ParticipantModel::Hil(_) => None,
        }
    }

    pub fn input_ports(&self) -> Vec<Port> {
        match self {
            ParticipantModel::Ict(m) => m.relays.iter().map(|r| Port::new(&r.input, &m.unit)).collect(),
            ParticipantModel::Hil(m) => match (&m.device, &m.ports) {
                (HilDevice::Chil(pi), _) => pi.input_ports(),
                (HilDevice::Phil(_), Some(p)) => vec![Port::new(&p.v_ref, "V")],
                (HilDevice::Phil(_), None) => vec![],
            },
            other => other.linear().map(|l| l.input_ports()).unwrap_or_default(),
        }
    }

    pub fn output_ports(&self) -> Vec<Port> {
        match self {
            ParticipantModel::Ict(m) => m.relays.iter().map(|r| Port::new(&r.output, &m.unit)).collect(),
            ParticipantModel::Hil(m) => match (&m.device, &m.ports) {
                (HilDevice::Chil(pi), _) => pi.output_ports(),
                (HilDevice::Phil(_), Some(p)) => vec![Port::new(&p.i_meas, "A")],
                (HilDevice::Phil(_), None) => vec![],
            },
            other => other.linear().map(|l| l.output_ports()).unwrap_or_default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_json_is_tagged_by_type() {
        let m: ParticipantModel =
            serde_json::from_str(r#"{"type":"linear","a":-1.0,"b":[0.5],"output":"s.x","inputs":["s.y"]}"#).unwrap();
        assert_eq!(m.type_name(), "linear");
        assert_eq!(m.input_ports()[0].topic, "s.y");
        let bad = serde_json::from_str::<ParticipantModel>(r#"{"type":"linear","a":-1.0,"output":"x","zzz":1}"#);
        assert!(bad.is_err());
    }

    #[test]
    fn hil_model_defaults_interface() {
        let m: ParticipantModel = serde_json::from_str(
            r#"{"type":"hil","device":{"mode":"phil","rh":10.0},"ports":{"v_ref":"a.v","i_meas":"a.i"}}"#,
        )
        .unwrap();
        let ParticipantModel::Hil(h) = m else { panic!() };
        assert_eq!(h.interface.tau_a_ns, 1_000_000);
        assert_eq!(h.interface.delay_steps, 1);
        assert_eq!(h.interface.sensor_gain, 1.0);
    }
}
