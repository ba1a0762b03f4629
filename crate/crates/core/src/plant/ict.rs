//! Discrete-event ICT simulator: messages travel over seeded netem links.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{Nanos, SignalSample};
use crate::netem::{LinkModel, LinkQueue, LinkSpec, ScheduleOutcome};

use super::PlantError;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkEvent {
    pub payload: SignalSample,
    pub send_time: Nanos,
    pub link: String,
    pub deliver_time: Option<Nanos>,
    pub dropped: bool,
}

impl NetworkEvent {
    pub fn new(payload: SignalSample, send_time: Nanos, link: &str) -> Self {
        NetworkEvent { payload, send_time, link: link.to_string(), deliver_time: None, dropped: false }
    }
}

/// Pending events of every link plus the set of dropped ones.
#[derive(Debug, Clone)]
pub struct IctSimulator {
    links: BTreeMap<String, LinkQueue<(u64, NetworkEvent)>>,
    sent: u64,
    now: Nanos,
    dropped: Vec<NetworkEvent>,
}

impl IctSimulator {
    pub fn new(links: impl IntoIterator<Item = (String, LinkModel)>) -> Self {
        IctSimulator {
            links: links.into_iter().map(|(id, m)| (id, LinkQueue::new(m))).collect(),
            sent: 0,
            now: 0,
            dropped: Vec::new(),
        }
    }

    fn send(&mut self, mut event: NetworkEvent) -> Result<(), PlantError> {
        let queue = self
            .links
            .get_mut(&event.link)
            .ok_or_else(|| PlantError::InvalidModel(format!("unknown link `{}`", event.link)))?;
        let order = self.sent;
        self.sent += 1;
        let probe = event.clone();
        match queue.schedule((order, probe), event.send_time) {
            ScheduleOutcome::Delivery(_) => {}
            ScheduleOutcome::Dropped { .. } => {
                event.dropped = true;
                self.dropped.push(event);
            }
        }
        Ok(())
    }

    /// Events lost on their link so far, in send order.
    pub fn dropped(&self) -> &[NetworkEvent] {
        &self.dropped
    }

    pub fn pending(&self) -> usize {
        self.links.values().map(|q| q.len()).sum()
    }

    pub fn snapshot_now(&self) -> Nanos {
        self.now
    }
}

/// Enqueues `new_events` and returns every event due at or before `now`,
/// ordered by delivery time and then by send order.
pub fn ict_step(
    sim: &mut IctSimulator,
    now: Nanos,
    new_events: Vec<NetworkEvent>,
) -> Result<Vec<NetworkEvent>, PlantError> {
    if now < sim.now {
        return Err(PlantError::InvalidModel(format!("time went backwards: {now} < {}", sim.now)));
    }
    sim.now = now;
    for ev in new_events {
        sim.send(ev)?;
    }
    let mut due: Vec<(Nanos, u64, NetworkEvent)> = Vec::new();
    for queue in sim.links.values_mut() {
        for (d, (order, mut ev)) in queue.deliver_due(now) {
            ev.deliver_time = Some(d.deliver_time);
            due.push((d.deliver_time, order, ev));
        }
    }
    due.sort_by_key(|(t, order, _)| (*t, *order));
    Ok(due.into_iter().map(|(_, _, ev)| ev).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Relay {
    pub input: String,
    pub output: String,
}

/// Communication network participant: forwards each input topic to an
/// output topic across one emulated link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IctModel {
    pub link: LinkSpec,
    pub relays: Vec<Relay>,
    #[serde(default = "one")]
    pub unit: String,
}

fn one() -> String {
    "1".to_string()
}

impl IctModel {
    pub fn check(&self) -> Result<(), PlantError> {
        if !self.link.is_valid() {
            return Err(PlantError::InvalidModel("ict link parameters out of range".into()));
        }
        if self.relays.is_empty() {
            return Err(PlantError::InvalidModel("ict model needs at least one relay".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::netem::Jitter;

    const MS: Nanos = 1_000_000;

    fn sim(model: LinkModel) -> IctSimulator {
        IctSimulator::new([("l".to_string(), model)])
    }

    fn ev(t: Nanos, seq: u64) -> NetworkEvent {
        NetworkEvent::new(SignalSample::real("a.b.c", t, seq as f64, "1", "p", seq), t, "l")
    }

    #[test]
    fn additive_delay() {
        let mut s = sim(LinkModel::fixed(5 * MS));
        assert!(ict_step(&mut s, 100 * MS, vec![ev(100 * MS, 0)]).unwrap().is_empty());
        let out = ict_step(&mut s, 105 * MS, vec![]).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].deliver_time, Some(105 * MS));
    }

    #[test]
    fn send_order_kept_without_jitter() {
        let mut s = sim(LinkModel::fixed(5 * MS));
        ict_step(&mut s, 0, vec![ev(0, 0)]).unwrap();
        ict_step(&mut s, MS, vec![ev(MS, 1)]).unwrap();
        let out = ict_step(&mut s, 10 * MS, vec![]).unwrap();
        let seqs: Vec<u64> = out.iter().map(|e| e.payload.seq).collect();
        assert_eq!(seqs, vec![0, 1]);
    }

    #[test]
    fn total_loss_never_delivers() {
        let mut m = LinkModel::fixed(MS);
        m.loss_prob = 1.0;
        let mut s = sim(m);
        ict_step(&mut s, 0, vec![ev(0, 0)]).unwrap();
        assert!(ict_step(&mut s, 1_000 * MS, vec![]).unwrap().is_empty());
        assert_eq!(s.dropped().len(), 1);
        assert!(s.dropped()[0].dropped);
    }

    #[test]
    fn events_are_conserved() {
        let mut m = LinkModel::fixed(3 * MS);
        m.jitter = Jitter::Uniform { a_ns: 2 * MS };
        m.loss_prob = 0.2;
        m.seed = 11;
        let mut s = sim(m);
        let mut delivered = 0;
        for k in 0..500u64 {
            delivered += ict_step(&mut s, k * MS, vec![ev(k * MS, k)]).unwrap().len();
        }
        delivered += ict_step(&mut s, 10_000 * MS, vec![]).unwrap().len();
        assert_eq!(delivered + s.dropped().len(), 500);
        assert_eq!(s.pending(), 0);
    }

    #[test]
    fn rejects_time_reversal() {
        let mut s = sim(LinkModel::ideal());
        ict_step(&mut s, 10, vec![]).unwrap();
        assert!(ict_step(&mut s, 5, vec![]).is_err());
    }
}
