//! Linear state-space blocks and their trapezoidal integrator.
//!
//! Every continuous built-in participant is expressed as
//!
//! ```text
//! x' = A x + B u + e(t)
//! y  = C x + D u + f(t)
//! ```
//!
//! The co-simulation participants integrate one block each with held or
//! interpolated inputs; the monolithic oracle assembles all blocks into one
//! system and integrates them together.

use nalgebra::{DMatrix, DVector};

use crate::model::Nanos;

use super::PlantError;

/// Magnitude above which a state or output is treated as numerical blow-up.
pub const OVERFLOW_LIMIT: f64 = 1e12;

pub const NS_PER_S: f64 = 1e9;

pub fn seconds(ns: Nanos) -> f64 {
    ns as f64 / NS_PER_S
}

/// Which one-sided limit of a piecewise-defined forcing term to evaluate.
///
/// A step `[t0, t1]` uses the right limit at `t0` and the left limit at `t1`,
/// so forcing discontinuities aligned with step boundaries are integrated
/// exactly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Right,
    Left,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    pub d: DMatrix<f64>,
}

impl StateSpace {
    pub fn states(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.c.nrows()
    }
}

/// A port of a block: canonical topic plus the SI unit symbol the block computes in.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Port {
    pub topic: String,
    pub unit: String,
}

impl Port {
    pub fn new(topic: &str, unit: &str) -> Self {
        Port { topic: topic.to_string(), unit: unit.to_string() }
    }
}

pub trait LinearModel: Send + Sync {
    fn state_space(&self) -> StateSpace;

    /// Time-dependent terms `(e(t), f(t))`.
    fn forcing(&self, t: Nanos, side: Side) -> (DVector<f64>, DVector<f64>);

    fn input_ports(&self) -> Vec<Port>;

    fn output_ports(&self) -> Vec<Port>;

    /// State at t = 0, given the input values assumed at start.
    fn initial_state(&self, u0: &DVector<f64>) -> DVector<f64>;
}

/// Integrates one block with trapezoidal steps of fixed size.
#[derive(Debug, Clone)]
pub struct Trapezoid {
    ss: StateSpace,
    h: Nanos,
    lhs: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    rhs: DMatrix<f64>,
}

impl Trapezoid {
    pub fn new(ss: StateSpace, h: Nanos) -> Result<Self, PlantError> {
        let n = ss.states();
        let hs = seconds(h);
        let eye = DMatrix::<f64>::identity(n, n);
        let lhs_m = &eye - &ss.a * (hs / 2.0);
        let rhs = &eye + &ss.a * (hs / 2.0);
        let lhs = if n == 0 {
            None
        } else {
            let lu = lhs_m.lu();
            if !lu.is_invertible() {
                return Err(PlantError::Singular("trapezoidal step matrix".into()));
            }
            Some(lu)
        };
        Ok(Trapezoid { ss, h, lhs, rhs })
    }

    pub fn step_size(&self) -> Nanos {
        self.h
    }

    pub fn state_space(&self) -> &StateSpace {
        &self.ss
    }

    /// One step from `t` to `t + h`; `u0`/`u1` are the inputs at both ends.
    pub fn step(
        &self,
        model: &dyn LinearModel,
        x: &DVector<f64>,
        t: Nanos,
        u0: &DVector<f64>,
        u1: &DVector<f64>,
    ) -> Result<DVector<f64>, PlantError> {
        let Some(lu) = &self.lhs else {
            return Ok(x.clone());
        };
        let hs = seconds(self.h);
        let (e0, _) = model.forcing(t, Side::Right);
        let (e1, _) = model.forcing(t + self.h, Side::Left);
        let drive = &self.ss.b * (u0 + u1) + e0 + e1;
        let rhs = &self.rhs * x + drive * (hs / 2.0);
        let next = lu.solve(&rhs).ok_or_else(|| PlantError::Singular("trapezoidal solve".into()))?;
        check_finite(next.iter())?;
        Ok(next)
    }

    pub fn output(
        &self,
        model: &dyn LinearModel,
        x: &DVector<f64>,
        t: Nanos,
        u: &DVector<f64>,
        side: Side,
    ) -> Result<DVector<f64>, PlantError> {
        let (_, f) = model.forcing(t, side);
        let y = &self.ss.c * x + &self.ss.d * u + f;
        check_finite(y.iter())?;
        Ok(y)
    }
}

pub fn check_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> Result<(), PlantError> {
    for v in values {
        if !v.is_finite() || v.abs() > OVERFLOW_LIMIT {
            return Err(PlantError::NumericalOverflow(*v));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// x' = -x / tau, y = x.
    struct Decay {
        tau: f64,
    }

    impl LinearModel for Decay {
        fn state_space(&self) -> StateSpace {
            StateSpace {
                a: DMatrix::from_element(1, 1, -1.0 / self.tau),
                b: DMatrix::zeros(1, 0),
                c: DMatrix::from_element(1, 1, 1.0),
                d: DMatrix::zeros(1, 0),
            }
        }
        fn forcing(&self, _t: Nanos, _side: Side) -> (DVector<f64>, DVector<f64>) {
            (DVector::zeros(1), DVector::zeros(1))
        }
        fn input_ports(&self) -> Vec<Port> {
            vec![]
        }
        fn output_ports(&self) -> Vec<Port> {
            vec![Port::new("x", "1")]
        }
        fn initial_state(&self, _u0: &DVector<f64>) -> DVector<f64> {
            DVector::from_element(1, 1.0)
        }
    }

    #[test]
    fn trapezoid_matches_rational_amplification() {
        let m = Decay { tau: 0.1 };
        let h = 10_000_000;
        let tr = Trapezoid::new(m.state_space(), h).unwrap();
        let u = DVector::zeros(0);
        let x1 = tr.step(&m, &DVector::from_element(1, 1.0), 0, &u, &u).unwrap();
        let z = 0.01 / 0.1;
        let expected = (1.0 - z / 2.0) / (1.0 + z / 2.0);
        assert!((x1[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn overflow_detected() {
        assert!(matches!(check_finite([1.0, 2e12].iter()), Err(PlantError::NumericalOverflow(_))));
        assert!(check_finite([f64::NAN].iter()).is_err());
        assert!(check_finite([-1e11].iter()).is_ok());
    }
}
