//! Current-source DER with a first-order response and voltage droop.
//!
//! ```text
//! tau · I' = k·(v_nom − v) + (p0 + p_set) / v_nom − I
//! ```

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::Nanos;

use super::block::{LinearModel, Port, Side, StateSpace};
use super::PlantError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerPorts {
    /// Measured terminal voltage, input (V).
    pub v_meas: String,
    /// Active power setpoint, input (W).
    #[serde(default)]
    pub p_set: Option<String>,
    /// Injected current, output (A).
    pub i_out: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DerModel {
    /// Response time constant, seconds.
    pub tau: f64,
    /// Droop gain, A/V.
    #[serde(default)]
    pub k: f64,
    pub v_nom: f64,
    /// Power reference added to the setpoint input, W.
    #[serde(default)]
    pub p0: f64,
    /// Current at t = 0, A.
    #[serde(default)]
    pub i0: f64,
    pub ports: DerPorts,
}

impl DerModel {
    pub fn check(&self) -> Result<(), PlantError> {
        if !(self.tau > 0.0) || !(self.v_nom > 0.0) || !self.k.is_finite() {
            return Err(PlantError::InvalidModel("der requires tau > 0, v_nom > 0 and finite k".into()));
        }
        Ok(())
    }
}

impl LinearModel for DerModel {
    fn state_space(&self) -> StateSpace {
        let m = 1 + usize::from(self.ports.p_set.is_some());
        let mut b = vec![-self.k / self.tau];
        if m == 2 {
            b.push(1.0 / (self.tau * self.v_nom));
        }
        StateSpace {
            a: DMatrix::from_element(1, 1, -1.0 / self.tau),
            b: DMatrix::from_row_slice(1, m, &b),
            c: DMatrix::from_element(1, 1, 1.0),
            d: DMatrix::zeros(1, m),
        }
    }

    fn forcing(&self, _t: Nanos, _side: Side) -> (DVector<f64>, DVector<f64>) {
        let e = (self.k * self.v_nom + self.p0 / self.v_nom) / self.tau;
        (DVector::from_element(1, e), DVector::zeros(1))
    }

    fn input_ports(&self) -> Vec<Port> {
        let mut ports = vec![Port::new(&self.ports.v_meas, "V")];
        if let Some(p) = &self.ports.p_set {
            ports.push(Port::new(p, "W"));
        }
        ports
    }

    fn output_ports(&self) -> Vec<Port> {
        vec![Port::new(&self.ports.i_out, "A")]
    }

    fn initial_state(&self, _u0: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.i0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::block::Trapezoid;

    fn der() -> DerModel {
        DerModel {
            tau: 0.1,
            k: 0.5,
            v_nom: 400.0,
            p0: 0.0,
            i0: 0.0,
            ports: DerPorts { v_meas: "b.der.v".into(), p_set: Some("b.der.p_set".into()), i_out: "b.der.i".into() },
        }
    }

    #[test]
    fn settles_to_droop_plus_power_current() {
        let m = der();
        let tr = Trapezoid::new(m.state_space(), 1_000_000).unwrap();
        let u = DVector::from_column_slice(&[390.0, 4000.0]);
        let mut x = m.initial_state(&u);
        for k in 0..3000u64 {
            x = tr.step(&m, &x, k * 1_000_000, &u, &u).unwrap();
        }
        let expected = 0.5 * 10.0 + 4000.0 / 400.0;
        assert!((x[0] - expected).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut m = der();
        m.tau = 0.0;
        assert!(m.check().is_err());
    }
}
