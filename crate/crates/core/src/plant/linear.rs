//! Scalar first-order systems and PI controllers.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::Nanos;

use super::block::{LinearModel, Port, Side, StateSpace};
use super::PlantError;

fn dimensionless() -> String {
    "1".to_string()
}

/// `x' = a·x + Σ b_i·u_i + c`, `y = x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearSystemModel {
    pub a: f64,
    #[serde(default)]
    pub b: Vec<f64>,
    #[serde(default)]
    pub c: f64,
    #[serde(default)]
    pub x0: f64,
    pub output: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default = "dimensionless")]
    pub unit: String,
}

impl LinearSystemModel {
    pub fn check(&self) -> Result<(), PlantError> {
        if self.b.len() != self.inputs.len() {
            return Err(PlantError::InvalidModel(format!(
                "linear system has {} gains for {} inputs",
                self.b.len(),
                self.inputs.len()
            )));
        }
        if ![self.a, self.c, self.x0].iter().chain(&self.b).all(|v| v.is_finite()) {
            return Err(PlantError::InvalidModel("linear system coefficients must be finite".into()));
        }
        Ok(())
    }
}

impl LinearModel for LinearSystemModel {
    fn state_space(&self) -> StateSpace {
        let m = self.inputs.len();
        StateSpace {
            a: DMatrix::from_element(1, 1, self.a),
            b: DMatrix::from_row_slice(1, m, &self.b),
            c: DMatrix::from_element(1, 1, 1.0),
            d: DMatrix::zeros(1, m),
        }
    }

    fn forcing(&self, _t: Nanos, _side: Side) -> (DVector<f64>, DVector<f64>) {
        (DVector::from_element(1, self.c), DVector::zeros(1))
    }

    fn input_ports(&self) -> Vec<Port> {
        self.inputs.iter().map(|t| Port::new(t, &self.unit)).collect()
    }

    fn output_ports(&self) -> Vec<Port> {
        vec![Port::new(&self.output, &self.unit)]
    }

    fn initial_state(&self, _u0: &DVector<f64>) -> DVector<f64> {
        DVector::from_element(1, self.x0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiPorts {
    pub measurement: String,
    pub output: String,
    #[serde(default = "dimensionless")]
    pub measurement_unit: String,
    #[serde(default = "dimensionless")]
    pub output_unit: String,
}

/// `e = reference − measurement`, `y = bias + kp·e + ki·∫e`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiController {
    pub kp: f64,
    #[serde(default)]
    pub ki: f64,
    pub reference: f64,
    #[serde(default)]
    pub bias: f64,
    pub ports: PiPorts,
}

impl PiController {
    pub fn check(&self) -> Result<(), PlantError> {
        if ![self.kp, self.ki, self.reference, self.bias].iter().all(|v| v.is_finite()) {
            return Err(PlantError::InvalidModel("controller gains must be finite".into()));
        }
        Ok(())
    }

    /// Output for a given error and integrator state.
    pub fn output_for(&self, error: f64, integral: f64) -> f64 {
        self.bias + self.kp * error + integral
    }
}

impl LinearModel for PiController {
    fn state_space(&self) -> StateSpace {
        StateSpace {
            a: DMatrix::zeros(1, 1),
            b: DMatrix::from_element(1, 1, -self.ki),
            c: DMatrix::from_element(1, 1, 1.0),
            d: DMatrix::from_element(1, 1, -self.kp),
        }
    }

    fn forcing(&self, _t: Nanos, _side: Side) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(1, self.ki * self.reference),
            DVector::from_element(1, self.kp * self.reference + self.bias),
        )
    }

    fn input_ports(&self) -> Vec<Port> {
        vec![Port::new(&self.ports.measurement, &self.ports.measurement_unit)]
    }

    fn output_ports(&self) -> Vec<Port> {
        vec![Port::new(&self.ports.output, &self.ports.output_unit)]
    }

    fn initial_state(&self, _u0: &DVector<f64>) -> DVector<f64> {
        DVector::zeros(1)
    }
}
