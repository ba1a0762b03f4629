//! Seeded emulation of inter-site WAN links.
//!
//! Every link owns one pseudo-random stream keyed by the experiment seed and
//! the link id, so adding a link never perturbs the draws of another one.
//! For each scheduled message the loss draw comes first, then the jitter draw.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::model::Nanos;

const NS_PER_MS: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Jitter {
    None,
    /// Uniform on `[-a, +a]`.
    Uniform {
        a_ns: u64,
    },
    /// Normal with standard deviation `sigma`, truncated at three sigma.
    Normal {
        sigma_ns: u64,
    },
}

impl Jitter {
    /// Largest positive excursion this distribution can add.
    pub fn bound_ns(&self) -> u64 {
        match *self {
            Jitter::None => 0,
            Jitter::Uniform { a_ns } => a_ns,
            Jitter::Normal { sigma_ns } => sigma_ns.saturating_mul(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkModel {
    pub base_delay: Nanos,
    pub jitter: Jitter,
    pub loss_prob: f64,
    pub seed: u64,
    pub non_overtaking: bool,
}

impl LinkModel {
    pub fn ideal() -> Self {
        LinkModel { base_delay: 0, jitter: Jitter::None, loss_prob: 0.0, seed: 0, non_overtaking: false }
    }

    pub fn fixed(base_delay: Nanos) -> Self {
        LinkModel { base_delay, ..Self::ideal() }
    }

    /// Upper bound on the effective delay of a delivered message.
    pub fn worst_case_delay(&self) -> Nanos {
        self.base_delay + self.jitter.bound_ns()
    }

    /// Lower bound on the effective delay of a delivered message.
    pub fn best_case_delay(&self) -> Nanos {
        self.base_delay.saturating_sub(self.jitter.bound_ns())
    }

    /// Profile used by the bundled two-site scenario for a 70 km inter-lab
    /// connection. The numbers are illustrative defaults, not measurements.
    pub fn demo_70km() -> Self {
        LinkModel {
            base_delay: 15_000_000,
            jitter: Jitter::Uniform { a_ns: 5_000_000 },
            loss_prob: 0.001,
            seed: 0,
            non_overtaking: false,
        }
    }
}

/// Jitter as written in `sites.json`, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum JitterSpec {
    None,
    Uniform { a_ms: f64 },
    Normal { sigma_ms: f64 },
}

impl Default for JitterSpec {
    fn default() -> Self {
        JitterSpec::None
    }
}

/// A link entry of `sites.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkSpec {
    #[serde(default)]
    pub peer: String,
    pub base_delay_ms: f64,
    #[serde(default)]
    pub jitter: JitterSpec,
    #[serde(default)]
    pub loss: f64,
    #[serde(default)]
    pub non_overtaking: bool,
}

fn ms_to_ns(ms: f64) -> Nanos {
    (ms.max(0.0) * NS_PER_MS).round() as Nanos
}

impl LinkSpec {
    pub fn to_model(&self, seed: u64) -> LinkModel {
        let jitter = match self.jitter {
            JitterSpec::None => Jitter::None,
            JitterSpec::Uniform { a_ms } => Jitter::Uniform { a_ns: ms_to_ns(a_ms) },
            JitterSpec::Normal { sigma_ms } => Jitter::Normal { sigma_ns: ms_to_ns(sigma_ms) },
        };
        LinkModel {
            base_delay: ms_to_ns(self.base_delay_ms),
            jitter,
            loss_prob: self.loss,
            seed,
            non_overtaking: self.non_overtaking,
        }
    }

    pub fn is_valid(&self) -> bool {
        let jitter_ok = match self.jitter {
            JitterSpec::None => true,
            JitterSpec::Uniform { a_ms } => a_ms >= 0.0 && a_ms.is_finite(),
            JitterSpec::Normal { sigma_ms } => sigma_ms >= 0.0 && sigma_ms.is_finite(),
        };
        self.base_delay_ms >= 0.0 && self.base_delay_ms.is_finite() && (0.0..=1.0).contains(&self.loss) && jitter_ok
    }
}

/// Derives the stream seed of one link from the experiment seed and the link id.
pub fn link_seed(experiment_seed: u64, link_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(b"fedlab-link|");
    h.update(experiment_seed.to_le_bytes());
    h.update(b"|");
    h.update(link_id.as_bytes());
    let out = h.finalize();
    u64::from_le_bytes(out[0..8].try_into().expect("sha256 is 32 bytes"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScheduleOutcome {
    Delivery(ScheduledDelivery),
    Dropped { draw_index: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ScheduledDelivery {
    pub deliver_time: Nanos,
    pub draw_index: u64,
}

/// Draws loss and delay for messages on one link.
#[derive(Debug, Clone)]
pub struct LinkScheduler {
    model: LinkModel,
    rng: ChaCha8Rng,
    next_draw: u64,
    last_deliver: Nanos,
}

impl LinkScheduler {
    pub fn new(model: LinkModel) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(model.seed);
        LinkScheduler { model, rng, next_draw: 0, last_deliver: 0 }
    }

    pub fn model(&self) -> &LinkModel {
        &self.model
    }

    fn jitter_draw(&mut self) -> i64 {
        match self.model.jitter {
            Jitter::None => 0,
            Jitter::Uniform { a_ns } => {
                if a_ns == 0 {
                    0
                } else {
                    let a = a_ns as i64;
                    self.rng.gen_range(-a..=a)
                }
            }
            Jitter::Normal { sigma_ns } => {
                if sigma_ns == 0 {
                    return 0;
                }
                let sigma = sigma_ns as f64;
                let normal = Normal::new(0.0, sigma).expect("sigma is finite and positive");
                loop {
                    let x: f64 = normal.sample(&mut self.rng);
                    if x.abs() <= 3.0 * sigma {
                        return x.round() as i64;
                    }
                }
            }
        }
    }

    pub fn schedule(&mut self, now: Nanos) -> ScheduleOutcome {
        let draw_index = self.next_draw;
        self.next_draw += 1;

        let u: f64 = self.rng.gen();
        if u < self.model.loss_prob {
            return ScheduleOutcome::Dropped { draw_index };
        }
        let delay = (self.model.base_delay as i64 + self.jitter_draw()).max(0) as Nanos;
        let mut deliver_time = now + delay;
        if self.model.non_overtaking {
            deliver_time = deliver_time.max(self.last_deliver);
        }
        self.last_deliver = self.last_deliver.max(deliver_time);
        ScheduleOutcome::Delivery(ScheduledDelivery { deliver_time, draw_index })
    }
}

/// A link scheduler with its pending deliveries.
#[derive(Debug, Clone)]
pub struct LinkQueue<T> {
    scheduler: LinkScheduler,
    pending: BTreeMap<ScheduledDelivery, T>,
}

impl<T> LinkQueue<T> {
    pub fn new(model: LinkModel) -> Self {
        LinkQueue { scheduler: LinkScheduler::new(model), pending: BTreeMap::new() }
    }

    pub fn model(&self) -> &LinkModel {
        self.scheduler.model()
    }

    pub fn schedule(&mut self, message: T, now: Nanos) -> ScheduleOutcome {
        let outcome = self.scheduler.schedule(now);
        if let ScheduleOutcome::Delivery(d) = outcome {
            self.pending.insert(d, message);
        }
        outcome
    }

    /// Removes and returns every delivery due at or before `now`, ordered by
    /// delivery time and then by draw index.
    pub fn deliver_due(&mut self, now: Nanos) -> Vec<(ScheduledDelivery, T)> {
        let later = self.pending.split_off(&ScheduledDelivery { deliver_time: now.saturating_add(1), draw_index: 0 });
        let due = std::mem::replace(&mut self.pending, later);
        due.into_iter().collect()
    }

    pub fn next_due(&self) -> Option<Nanos> {
        self.pending.keys().next().map(|d| d.deliver_time)
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MS: Nanos = 1_000_000;

    #[test]
    fn additive_delay() {
        let mut q = LinkQueue::new(LinkModel::fixed(50 * MS));
        let out = q.schedule("m", 100 * MS);
        assert_eq!(out, ScheduleOutcome::Delivery(ScheduledDelivery { deliver_time: 150 * MS, draw_index: 0 }));
    }

    #[test]
    fn total_loss_drops_everything() {
        let mut q = LinkQueue::new(LinkModel { loss_prob: 1.0, ..LinkModel::fixed(5 * MS) });
        for i in 0..100 {
            assert!(matches!(q.schedule(i, i * MS), ScheduleOutcome::Dropped { .. }));
        }
        assert!(q.deliver_due(Nanos::MAX).is_empty());
    }

    #[test]
    fn same_seed_same_schedule() {
        let model = LinkModel {
            base_delay: 20 * MS,
            jitter: Jitter::Normal { sigma_ns: 4 * MS },
            loss_prob: 0.1,
            seed: 99,
            non_overtaking: false,
        };
        let run = || {
            let mut q = LinkQueue::new(model.clone());
            (0..500).map(|i| q.schedule(i, i * MS)).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn deliver_due_threshold_and_empty() {
        let mut q: LinkQueue<u32> = LinkQueue::new(LinkModel::fixed(0));
        assert!(q.deliver_due(5).is_empty());
        q.schedule(1, 10 * MS);
        q.schedule(2, 12 * MS);
        let first = q.deliver_due(11 * MS);
        assert_eq!(first.iter().map(|(_, m)| *m).collect::<Vec<_>>(), vec![1]);
        assert_eq!(q.len(), 1);
    }

    #[test]
    fn ties_released_by_draw_index() {
        let mut q = LinkQueue::new(LinkModel::fixed(0));
        q.schedule("b", 10 * MS);
        q.schedule("a", 10 * MS);
        let out: Vec<_> = q.deliver_due(10 * MS).into_iter().collect();
        assert_eq!(out[0].0.draw_index, 0);
        assert_eq!(out[0].1, "b");
        assert_eq!(out[1].1, "a");
    }

    #[test]
    fn non_overtaking_preserves_send_order() {
        let model = LinkModel {
            base_delay: 10 * MS,
            jitter: Jitter::Uniform { a_ns: 9 * MS },
            loss_prob: 0.0,
            seed: 7,
            non_overtaking: true,
        };
        let mut q = LinkQueue::new(model);
        for i in 0..1000u64 {
            q.schedule(i, i * MS / 2);
        }
        let order: Vec<u64> = q.deliver_due(Nanos::MAX).into_iter().map(|(_, m)| m).collect();
        assert_eq!(order, (0..1000).collect::<Vec<_>>());
    }

    #[test]
    fn delay_never_negative() {
        let model = LinkModel {
            base_delay: MS,
            jitter: Jitter::Uniform { a_ns: 10 * MS },
            loss_prob: 0.0,
            seed: 3,
            non_overtaking: false,
        };
        let mut s = LinkScheduler::new(model);
        for i in 0..1000 {
            match s.schedule(i * MS) {
                ScheduleOutcome::Delivery(d) => assert!(d.deliver_time >= i * MS),
                ScheduleOutcome::Dropped { .. } => unreachable!(),
            }
        }
    }

    #[test]
    fn link_seeds_differ_per_link() {
        assert_ne!(link_seed(1, "siteA->siteB"), link_seed(1, "siteB->siteA"));
        assert_eq!(link_seed(1, "siteA->siteB"), link_seed(1, "siteA->siteB"));
    }

    #[test]
    fn link_spec_parses_json() {
        let profile: LinkSpec = serde_json::from_str(
            r#"{"peer":"siteB","base_delay_ms":15,"jitter":{"uniform":{"a_ms":5}},"loss":0.001,"non_overtaking":false}"#,
        )
        .unwrap();
        assert!(profile.is_valid());
        let m = profile.to_model(4);
        assert_eq!(m, LinkModel { seed: 4, ..LinkModel::demo_70km() });
        let bad: LinkSpec = serde_json::from_str(r#"{"peer":"x","base_delay_ms":1,"loss":2}"#).unwrap();
        assert!(!bad.is_valid());
    }
}
