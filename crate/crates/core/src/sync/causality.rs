//! Post-hoc causality check over consumption and arrival records.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::model::Nanos;

/// A consumer used route `route` during the step starting at `used_at`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consumption {
    pub route: usize,
    pub delay_steps: u32,
    pub used_at: Nanos,
}

/// The sample produced at `produced_at` on `route` became available at `arrival`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arrival {
    pub route: usize,
    pub produced_at: Nanos,
    pub arrival: Nanos,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub route: usize,
    pub used_at: Nanos,
    pub required_produced_at: Nanos,
    pub arrival: Nanos,
}

/// A step starting at `used_at` with coupling delay `d` needs the sample
/// produced at `used_at + M − d·M` (clamped at 0). It is violated when that
/// sample arrived after `used_at`. Samples that never arrived (lost and not
/// retransmitted) have nothing to compare and are skipped.
pub fn causality_check(consumptions: &[Consumption], arrivals: &[Arrival], macro_step: Nanos) -> Vec<Violation> {
    let mut first: HashMap<(usize, Nanos), Nanos> = HashMap::new();
    for a in arrivals {
        first.entry((a.route, a.produced_at)).and_modify(|t| *t = (*t).min(a.arrival)).or_insert(a.arrival);
    }
    let mut out = Vec::new();
    for c in consumptions {
        let required = (c.used_at + macro_step).saturating_sub(c.delay_steps as Nanos * macro_step);
        if let Some(&arrival) = first.get(&(c.route, required)) {
            if c.used_at < arrival {
                out.push(Violation { route: c.route, used_at: c.used_at, required_produced_at: required, arrival });
            }
        }
    }
    out
}
