use std::collections::BTreeMap;

use fedlab_core::experiment::SyncMode;
use fedlab_core::hub::{Hub, RunState, TraceFilter};
use fedlab_core::model::Quality;
use fedlab_core::netem::{JitterSpec, LinkSpec};
use fedlab_core::plant::oracle::{monolithic_oracle, OracleOptions};
use fedlab_core::plant::PlantError;
use fedlab_core::scenarios;
use fedlab_core::sync::{run_experiment, RunOptions};
use fedlab_core::trace::parse_csv;

fn fixed(ms: f64) -> LinkSpec {
    LinkSpec { peer: String::new(), base_delay_ms: ms, jitter: JitterSpec::None, loss: 0.0, non_overtaking: false }
}

fn by_topic(csv: &str) -> BTreeMap<String, BTreeMap<u64, f64>> {
    let mut out: BTreeMap<String, BTreeMap<u64, f64>> = BTreeMap::new();
    for r in parse_csv(csv).unwrap() {
        out.entry(r.sample.topic.clone()).or_default().insert(r.sample.sim_time, r.sample.value.as_real().unwrap());
    }
    out
}

#[test]
fn conservative_grants_one_per_macro_step() {
    let mut exp = scenarios::demo();
    exp.duration_ns = 100_000_000;
    let r = run_experiment(&Hub::new(scenarios::sites()), exp, &RunOptions::default()).unwrap();
    assert_eq!(r.state, RunState::Completed);
    let until: Vec<u64> = r.grants.iter().map(|g| g.granted_until_ns).collect();
    assert_eq!(until, (1..=10).map(|k| k * 10_000_000).collect::<Vec<_>>());
    assert!(r.grants.windows(2).all(|w| w[0].barrier_round < w[1].barrier_round));
}

#[test]
fn conservative_has_no_causality_violations_under_jitter_and_loss() {
    let profile = LinkSpec {
        peer: String::new(),
        base_delay_ms: 30.0,
        jitter: JitterSpec::Uniform { a_ms: 25.0 },
        loss: 0.05,
        non_overtaking: false,
    };
    let hub = Hub::new(scenarios::sites().with_uniform_links(&profile));
    let r = run_experiment(&hub, scenarios::demo(), &RunOptions::default()).unwrap();
    assert!(!r.consumptions.is_empty());
    assert_eq!(r.violations(10_000_000), vec![]);
}

#[test]
fn stage_machine_reaches_hold_after_dispatch() {
    let r = run_experiment(&Hub::new(scenarios::sites()), scenarios::demo(), &RunOptions::default()).unwrap();
    let stages: Vec<&str> = r.stage_history.iter().map(|(_, s)| s.as_str()).collect();
    assert_eq!(stages, ["warmup", "dispatch", "hold"]);
    assert_eq!(r.stage_history[1].0, 200_000_000);
}

/// Resistive grid: KCL at the load node and KVL across the source
/// resistance must hold at every sample, whatever the DER does.
#[test]
fn grid_samples_satisfy_circuit_laws() {
    let r = run_experiment(&Hub::new(scenarios::sites()), scenarios::demo(), &RunOptions::default()).unwrap();
    let s = by_topic(&r.trace_csv);
    let (v, i_src, i_der) = (&s["siteA.grid.v"], &s["siteA.grid.i_src"], &s["siteB.der.i"]);
    assert_eq!(v.len(), 101);
    for (t, v) in v {
        let vs = if *t >= 500_000_000 { 420.0 } else { 400.0 };
        let (is, id) = (i_src[t], i_der[t]);
        assert!((vs - 1.0 * is - v).abs() < 1e-9, "KVL at {t}");
        assert!((is + id - v / 10.0).abs() < 1e-9, "KCL at {t}");
        // Power delivered by the source is dissipated in rs and the node.
        assert!((vs * is - is * is - v * is).abs() < 1e-6);
    }
}

#[test]
fn best_effort_on_ideal_link_is_at_most_one_step_stale() {
    let hub = Hub::new(scenarios::sites().with_uniform_links(&fixed(0.0)));
    let opts = RunOptions { mode: Some(SyncMode::BestEffort), ..Default::default() };
    let r = run_experiment(&hub, scenarios::demo(), &opts).unwrap();
    assert_eq!(r.mode, SyncMode::BestEffort);
    let n = r.staleness.len();
    assert!(n > 150);
    let fresh = r.staleness.iter().filter(|s| s.staleness_ns() <= 10_000_000).count();
    assert!(fresh as f64 >= 0.99 * n as f64, "{fresh}/{n} within one step");
}

#[test]
fn best_effort_marks_outputs_before_first_arrival() {
    let hub = Hub::new(scenarios::sites().with_uniform_links(&fixed(200.0)));
    let opts = RunOptions { mode: Some(SyncMode::BestEffort), ..Default::default() };
    let r = run_experiment(&hub, scenarios::demo(), &opts).unwrap();
    let rows =
        hub.query_trace(&TraceFilter { topic: Some("siteB.der.i".into()), ..TraceFilter::run(&r.run_id) }).unwrap();
    let early: Vec<Quality> = rows
        .iter()
        .filter(|r| (10_000_000..150_000_000).contains(&r.sample.sim_time))
        .map(|r| r.sample.quality)
        .collect();
    assert!(!early.is_empty());
    assert!(early.iter().all(|q| *q == Quality::Estimated), "{early:?}");
    let late: Vec<Quality> =
        rows.iter().filter(|r| r.sample.sim_time >= 400_000_000).map(|r| r.sample.quality).collect();
    assert!(late.iter().all(|q| *q == Quality::Stale), "200 ms old inputs are stale");
}

#[test]
fn waveform_relaxation_reports_non_convergence() {
    let mut exp = scenarios::wr_coupled();
    let wr = exp.wr.as_mut().unwrap();
    wr.max_iter = 3;
    wr.window_ns = 500_000_000;
    let r = run_experiment(&Hub::new(scenarios::sites()), exp, &RunOptions::default()).unwrap();
    assert_eq!(r.state, RunState::Completed);
    assert_eq!(r.warnings.len(), 2);
    assert!(r.warnings.iter().all(|w| w.starts_with("WRNotConverged")));
    assert_eq!(r.wr_log.len(), 6);
    assert!(r.wr_log.iter().all(|row| !row.converged));
}

#[test]
fn waveform_relaxation_residuals_shrink() {
    let r = run_experiment(&Hub::new(scenarios::sites()), scenarios::wr_coupled(), &RunOptions::default()).unwrap();
    let first: Vec<f64> = r.wr_log.iter().filter(|row| row.window_index == 0).map(|row| row.residual).collect();
    assert!(first.windows(2).all(|w| w[1] < w[0]), "{first:?}");
}

#[test]
fn oracle_is_converged_in_substeps() {
    let reg = scenarios::sites();
    let exp = scenarios::demo();
    let fine = monolithic_oracle(&exp, &reg.model, OracleOptions::default()).unwrap();
    let coarse = monolithic_oracle(&exp, &reg.model, OracleOptions { substeps: 50 }).unwrap();
    for (topic, s) in &fine.series {
        let worst = s.values.iter().zip(&coarse.series[topic].values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-8, "{topic}: {worst:e}");
    }
}

#[test]
fn oracle_matches_closed_form_for_the_coupled_pair() {
    // x' = -x + 0.5 y, y' = -y + 0.5 x with x(0) = 1, y(0) = 0: modes x ± y
    // decay at rates 0.5 and 1.5.
    let reg = scenarios::sites();
    let oracle = monolithic_oracle(&scenarios::wr_coupled(), &reg.model, OracleOptions::default()).unwrap();
    let w = 0.5;
    for (k, t_ns) in oracle.times.iter().enumerate().step_by(97) {
        let t = *t_ns as f64 * 1e-9;
        let e = (-t).exp();
        let x = e * (w * t).cosh();
        let y = e * (w * t).sinh();
        assert!((oracle.series["siteA.wr.x"].values[k] - x).abs() < 1e-9, "x at {t}");
        assert!((oracle.series["siteB.wr.y"].values[k] - y).abs() < 1e-9, "y at {t}");
    }
}

#[test]
fn oracle_rejects_participants_without_linear_model() {
    let reg = scenarios::sites();
    let mut exp = scenarios::demo();
    exp.participants[1].model = None;
    assert!(matches!(
        monolithic_oracle(&exp, &reg.model, OracleOptions::default()),
        Err(PlantError::UnsupportedTopology(_))
    ));
}
