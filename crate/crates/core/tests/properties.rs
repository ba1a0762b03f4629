use std::collections::BTreeMap;

use fedlab_core::hub::store::{TraceRecord, TraceStore};
use fedlab_core::hub::{Hub, TraceFilter};
use fedlab_core::model::{from_canonical, to_canonical, ulp_scale_tolerance, SignalSample};
use fedlab_core::netem::{Jitter, JitterSpec, LinkModel, LinkQueue, LinkSpec, ScheduleOutcome};
use fedlab_core::plant::grid::{power_step, GridModel, PowerState};
use fedlab_core::plant::ict::{ict_step, IctSimulator, NetworkEvent};
use fedlab_core::scenarios;
use fedlab_core::sync::{run_experiment, RunOptions};
use proptest::prelude::*;

proptest! {
    #[test]
    fn mapping_round_trip(site in 0usize..2, row in 0usize..16, mantissa in -1e6f64..1e6, exp in -6i32..3) {
        let reg = scenarios::sites();
        let table = reg.sites[site].table();
        let row = &table.rows[row % table.rows.len()];
        let value = mantissa * 10f64.powi(exp);
        let local = SignalSample::real(&row.local, 0, value, &row.unit, "scada", 1);
        let canonical = to_canonical(&local, &table, &reg.model).unwrap();
        prop_assert_eq!(&canonical.topic, &row.canonical);
        let back = from_canonical(&canonical, &table, &reg.model).unwrap();
        prop_assert_eq!(&back.topic, &row.local);
        prop_assert_eq!(&back.unit, &row.unit);
        let from = reg.model.unit(&row.unit).unwrap();
        let to = reg.model.entry_unit(&row.canonical).unwrap();
        let err = (back.value.as_real().unwrap() - value).abs();
        prop_assert!(err <= ulp_scale_tolerance(value, from, to), "{} -> {:?}", value, back.value);
    }

    #[test]
    fn power_step_is_a_pure_function(
        rs in 0.01f64..10.0, rl in 0.1f64..100.0, ls in proptest::option::of(1e-4f64..1.0),
        inj in -50.0f64..50.0, dt in 1_000u64..20_000_000, steps in 1usize..20,
    ) {
        let mut m = GridModel::resistive(400.0, rs, rl);
        m.ls = ls;
        let inputs = [SignalSample::real(&m.ports.i_injection.clone().unwrap_or_default(), 0, inj, "A", "der", 0)];
        let run = || {
            let mut s = PowerState::initial(&m).unwrap();
            let mut out = Vec::new();
            for _ in 0..steps {
                let (next, o) = power_step(&s, &m, &inputs, dt).unwrap();
                out.push((next.node_voltage.to_bits(), o.iter().map(|(_, v)| v.to_bits()).collect::<Vec<_>>()));
                s = next;
            }
            out
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn ict_conserves_messages(
        seed in any::<u64>(), loss in 0.0f64..0.5, base in 0u64..50_000_000, a in 0u64..20_000_000,
        sends in proptest::collection::vec(0u64..5, 1..60),
    ) {
        let model = LinkModel { base_delay: base, jitter: Jitter::Uniform { a_ns: a }, loss_prob: loss, seed, non_overtaking: false };
        let mut sim = IctSimulator::new([("l".to_string(), model)]);
        let (mut sent, mut delivered) = (0usize, 0usize);
        for (k, n) in sends.iter().enumerate() {
            let now = k as u64 * 10_000_000;
            let batch: Vec<NetworkEvent> = (0..*n)
                .map(|i| {
                    sent += 1;
                    NetworkEvent::new(SignalSample::real("x", now, i as f64, "A", "p", sent as u64), now, "l")
                })
                .collect();
            let due = ict_step(&mut sim, now, batch).unwrap();
            prop_assert!(due.iter().all(|e| e.deliver_time.unwrap() <= now && !e.dropped));
            delivered += due.len();
            prop_assert_eq!(sent, delivered + sim.dropped().len() + sim.pending());
        }
        delivered += ict_step(&mut sim, u64::MAX / 2, Vec::new()).unwrap().len();
        prop_assert_eq!(sim.pending(), 0);
        prop_assert_eq!(sent, delivered + sim.dropped().len());
    }

    #[test]
    fn non_overtaking_links_preserve_send_order(
        seed in any::<u64>(), base in 0u64..10_000_000, a in 0u64..10_000_000,
        gaps in proptest::collection::vec(0u64..5_000_000, 1..200),
    ) {
        let model = LinkModel { base_delay: base, jitter: Jitter::Uniform { a_ns: a }, loss_prob: 0.0, seed, non_overtaking: true };
        let mut q = LinkQueue::new(model);
        let mut now = 0;
        for (i, g) in gaps.iter().enumerate() {
            now += g;
            prop_assert!(matches!(q.schedule(i, now), ScheduleOutcome::Delivery(_)));
        }
        let order: Vec<usize> = q.deliver_due(u64::MAX).into_iter().map(|(_, i)| i).collect();
        prop_assert_eq!(order, (0..gaps.len()).collect::<Vec<_>>());
    }

    /// Trapezoidal steps on the RL feeder after an injection step: the error
    /// against the exponential closed form drops about 4x per halved step.
    #[test]
    fn trapezoid_is_second_order(rs in 0.5f64..5.0, rl in 5.0f64..50.0, tau_ms in 5u64..50, inj in 1.0f64..20.0) {
        let vs = 400.0;
        let tau = tau_ms as f64 * 1e-3;
        let ls = tau * (rs + rl);
        let mut m = GridModel::resistive(vs, rs, rl);
        m.ls = Some(ls);
        let topic = m.ports.i_injection.clone().unwrap();
        let inputs = [SignalSample::real(&topic, 0, inj, "A", "der", 0)];
        // i' = (vs - (rs + rl) i - rl inj) / ls, i(0) = vs / (rs + rl)
        let i0 = vs / (rs + rl);
        let i_inf = (vs - rl * inj) / (rs + rl);
        let horizon = tau_ms * 1_000_000;
        let exact_v = rl * (i_inf + (i0 - i_inf) * (-1.0f64).exp() + inj);
        let err = |n: u64| {
            let mut s = PowerState::initial(&m).unwrap();
            for _ in 0..n {
                s = power_step(&s, &m, &inputs, horizon / n).unwrap().0;
            }
            (s.node_voltage - exact_v).abs()
        };
        let (e1, e2, e3) = (err(8), err(16), err(32));
        prop_assert!((3.5..=4.5).contains(&(e1 / e2)), "{} {}", e1, e2);
        prop_assert!((3.5..=4.5).contains(&(e2 / e3)), "{} {}", e2, e3);
    }

    #[test]
    fn trace_store_is_append_only(ops in proptest::collection::vec((0u64..20, -1e3f64..1e3), 1..100)) {
        let store = TraceStore::new();
        let mut seen = BTreeMap::new();
        let mut prev: Vec<TraceRecord> = Vec::new();
        for (seq, v) in ops {
            let fresh = store.append("r", SignalSample::real("a.b", seq, v, "V", "p", seq), 0).unwrap();
            prop_assert_eq!(fresh, !seen.contains_key(&seq));
            seen.entry(seq).or_insert(v);
            let now = store.query(&TraceFilter::run("r"));
            for p in &prev {
                prop_assert!(now.iter().any(|r| r.sample == p.sample), "row for seq {} changed", p.sample.seq);
            }
            prev = now;
        }
        prop_assert_eq!(store.run_len("r"), seen.len());
        for r in &prev {
            prop_assert_eq!(r.sample.value.as_real(), Some(seen[&r.sample.seq]), "first write wins");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conservative_grants_are_monotone(
        base in 0.0f64..300.0, a in 0.0f64..100.0, loss in 0.0f64..0.2, seed in any::<u64>(),
    ) {
        let profile = LinkSpec { peer: String::new(), base_delay_ms: base, jitter: JitterSpec::Uniform { a_ms: a }, loss, non_overtaking: false };
        let hub = Hub::new(scenarios::sites().with_uniform_links(&profile));
        let mut exp = scenarios::demo();
        exp.seed = seed;
        exp.duration_ns = 300_000_000;
        let r = run_experiment(&hub, exp, &RunOptions::default()).unwrap();
        prop_assert_eq!(r.grants.len(), 30);
        for w in r.grants.windows(2) {
            prop_assert!(w[1].granted_until_ns == w[0].granted_until_ns + 10_000_000);
            prop_assert!(w[1].barrier_round > w[0].barrier_round);
            prop_assert!(w[1].wall_time_ns >= w[0].wall_time_ns);
        }
        prop_assert!(r.violations(10_000_000).is_empty());
    }
}
