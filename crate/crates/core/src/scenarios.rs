//! Bundled scenario documents: a two-site registry, the grid + DER demo and
//! the coupled first-order pair used for waveform relaxation.

use crate::experiment::{parse_experiment, ExperimentDescription};
use crate::registry::Registry;

pub const SITES_JSON: &str = include_str!("../scenarios/sites.json");
pub const DEMO_JSON: &str = include_str!("../scenarios/demo.json");
pub const WR_COUPLED_JSON: &str = include_str!("../scenarios/wr_coupled.json");
pub const WR_UNCOUPLED_JSON: &str = include_str!("../scenarios/wr_uncoupled.json");

pub fn sites() -> Registry {
    Registry::from_json(SITES_JSON).expect("bundled sites.json is valid")
}

fn load(doc: &str) -> ExperimentDescription {
    parse_experiment(doc).expect("bundled experiment parses")
}

/// Grid on siteA, DER on siteB, 10 ms steps, one power setpoint stage.
pub fn demo() -> ExperimentDescription {
    load(DEMO_JSON)
}

/// The demo with every macro and participant step set to `step_ns`.
pub fn demo_with_step(step_ns: u64) -> ExperimentDescription {
    let mut exp = demo();
    exp.macro_step_ns = step_ns;
    for p in &mut exp.participants {
        p.step_ns = step_ns;
    }
    exp
}

/// `x' = -x + 0.5 y`, `y' = -y + 0.5 x` split across the two sites.
pub fn wr_coupled() -> ExperimentDescription {
    load(WR_COUPLED_JSON)
}

/// Same pair with zero coupling.
pub fn wr_uncoupled() -> ExperimentDescription {
    load(WR_UNCOUPLED_JSON)
}
