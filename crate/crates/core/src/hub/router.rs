//! Route fan-out through emulated inter-site links.

use std::collections::BTreeMap;

use crate::experiment::{DomainKind, ExperimentDescription};
use crate::model::{Nanos, SignalSample, Value};
use crate::netem::{LinkQueue, ScheduleOutcome, ScheduledDelivery};
use crate::plant::participant::Conv;
use crate::registry::Registry;

use super::HubError;

/// Retransmissions of one message before its link is declared dead.
pub const MAX_ATTEMPTS: u32 = 10_000;

#[derive(Debug, Clone)]
struct RouteRt {
    from: (String, String),
    to: (String, String),
    link: String,
    /// Intra-site HIL loops are wired directly, not through the hub.
    bypass: bool,
    conv: Conv,
    to_unit: String,
}

/// A routed sample, already renamed and converted for its consumer.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub route: usize,
    pub sample: SignalSample,
    pub sent_at: Nanos,
    pub attempts: u32,
}

pub struct Router {
    routes: Vec<RouteRt>,
    links: BTreeMap<String, LinkQueue<Delivery>>,
    counters: BTreeMap<(String, String), u64>,
    dropped: u64,
}

impl Router {
    pub fn new(exp: &ExperimentDescription, reg: &Registry) -> Result<Router, HubError> {
        let mut routes = Vec::new();
        let mut links = BTreeMap::new();
        for r in &exp.routes {
            let src = exp
                .participant(&r.from.participant)
                .ok_or_else(|| HubError::InvalidArgument(format!("unknown participant {}", r.from.participant)))?;
            let dst = exp
                .participant(&r.to.participant)
                .ok_or_else(|| HubError::InvalidArgument(format!("unknown participant {}", r.to.participant)))?;
            let link = Registry::link_id(&src.site, &dst.site);
            if !links.contains_key(&link) {
                let model = reg
                    .link_model(&src.site, &dst.site, exp.seed)
                    .ok_or_else(|| HubError::InvalidArgument(format!("no link {link}")))?;
                links.insert(link.clone(), LinkQueue::new(model));
            }
            let unit =
                |t: &str| reg.model.entry_unit(t).map(|u| u.symbol.clone()).map_err(|e| HubError::Model(e.to_string()));
            let to_unit = unit(&r.to.topic)?;
            let conv =
                Conv::new(&reg.model, &unit(&r.from.topic)?, &to_unit).map_err(|e| HubError::Model(e.to_string()))?;
            let hil = src.kind == DomainKind::HilRealtime || dst.kind == DomainKind::HilRealtime;
            routes.push(RouteRt {
                from: (r.from.participant.clone(), r.from.topic.clone()),
                to: (r.to.participant.clone(), r.to.topic.clone()),
                link,
                bypass: hil && src.site == dst.site,
                conv,
                to_unit,
            });
        }
        Ok(Router { routes, links, counters: BTreeMap::new(), dropped: 0 })
    }

    pub fn route_count(&self) -> usize {
        self.routes.len()
    }

    /// Indices of the routes fed by `(participant, topic)`.
    pub fn routes_from(&self, participant: &str, topic: &str) -> Vec<usize> {
        (0..self.routes.len())
            .filter(|i| self.routes[*i].from.0 == participant && self.routes[*i].from.1 == topic)
            .collect()
    }

    /// Sends a canonical sample along every route it feeds. With `reliable`,
    /// lost transmissions are repeated after the link's worst-case delay.
    pub fn send(&mut self, sample: &SignalSample, now: Nanos, reliable: bool) -> Result<(), HubError> {
        for i in self.routes_from(&sample.source, &sample.topic) {
            let rt = &self.routes[i];
            let mut out = sample.clone();
            out.topic = rt.to.1.clone();
            out.unit = rt.to_unit.clone();
            if let Value::Real(v) = out.value {
                out.value = Value::Real(rt.conv.apply(v));
            }
            let queue = self.links.get_mut(&rt.link).expect("link per route");
            let retry = queue.model().worst_case_delay().max(1);
            let mut at = now;
            let mut attempts = 1;
            loop {
                let d = Delivery { route: i, sample: out.clone(), sent_at: now, attempts };
                match queue.schedule(d, at) {
                    ScheduleOutcome::Delivery(_) => break,
                    ScheduleOutcome::Dropped { .. } => {
                        self.dropped += 1;
                        if !reliable {
                            break;
                        }
                        if attempts >= MAX_ATTEMPTS {
                            return Err(HubError::LinkDead(rt.link.clone()));
                        }
                        attempts += 1;
                        at += retry;
                    }
                }
            }
        }
        Ok(())
    }

    /// Everything due by `now`, in delivery order per link, links in id order.
    pub fn deliver_due(&mut self, now: Nanos) -> Vec<(ScheduledDelivery, Delivery)> {
        let mut out = Vec::new();
        for q in self.links.values_mut() {
            out.extend(q.deliver_due(now));
        }
        for (_, d) in &out {
            let rt = &self.routes[d.route];
            if !rt.bypass {
                *self.counters.entry((rt.from.0.clone(), rt.to.0.clone())).or_default() += 1;
            }
        }
        out
    }

    pub fn next_due(&self) -> Option<Nanos> {
        self.links.values().filter_map(|q| q.next_due()).min()
    }

    pub fn in_flight(&self) -> usize {
        self.links.values().map(|q| q.len()).sum()
    }

    /// Hub deliveries per `(producer, consumer)`; bypassed routes are not counted.
    pub fn counters(&self) -> &BTreeMap<(String, String), u64> {
        &self.counters
    }

    pub fn dropped(&self) -> u64 {
        self.dropped
    }

    pub fn route_endpoints(&self, route: usize) -> ((&str, &str), (&str, &str)) {
        let r = &self.routes[route];
        ((&r.from.0, &r.from.1), (&r.to.0, &r.to.1))
    }

    pub fn is_bypass(&self, route: usize) -> bool {
        self.routes[route].bypass
    }
}
