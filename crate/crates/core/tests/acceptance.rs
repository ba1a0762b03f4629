//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on failure.
//!
//! Run with `cargo test -p fedlab-core --test acceptance`.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::Instant;

use fedlab_core::command::{Command, CommandKind};
use fedlab_core::compare::compare_traces;
use fedlab_core::experiment::{parse_experiment, validate_layers, Layer, Severity, SyncMode};
use fedlab_core::hub::{Hub, HubError, RunClock, RunState, TraceFilter};
use fedlab_core::model::{from_canonical, to_canonical, ulp_scale_tolerance, SignalSample};
use fedlab_core::netem::{JitterSpec, LinkModel, LinkSpec};
use fedlab_core::plant::grid::SourceProfile;
use fedlab_core::plant::hil::{
    hil_run, itm_stability, simulate_itm_loop, Coupling, HilDevice, HilModel, HilRunOptions, ItmCoupling, LoopLinks,
    LoopOutcome, PhilDevice, PhilInterfaceConfig, PhilPorts, Verdict,
};
use fedlab_core::plant::oracle::{monolithic_oracle, OracleOptions};
use fedlab_core::registry::OperatorConfig;
use fedlab_core::scenarios;
use fedlab_core::sync::causality::{causality_check, Arrival, Consumption};
use fedlab_core::sync::{run_experiment, RunOptions};
use fedlab_core::trace::parse_csv;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

type Outcome = Result<String, String>;

fn check(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn link(base_ms: f64, jitter_ms: f64, loss: f64) -> LinkSpec {
    let jitter = if jitter_ms > 0.0 { JitterSpec::Uniform { a_ms: jitter_ms } } else { JitterSpec::None };
    LinkSpec { peer: String::new(), base_delay_ms: base_ms, jitter, loss, non_overtaking: false }
}

/// {0 ms; 50±20 ms; 200±100 ms; 70 km profile with 1 % loss}.
fn profiles() -> Vec<(&'static str, LinkSpec)> {
    vec![
        ("0ms", link(0.0, 0.0, 0.0)),
        ("50±20ms", link(50.0, 20.0, 0.0)),
        ("200±100ms", link(200.0, 100.0, 0.0)),
        ("loss1%", link(15.0, 5.0, 0.01)),
    ]
}

fn conservative_determinism() -> Outcome {
    let reg = scenarios::sites();
    let mut hashes = Vec::new();
    for (name, profile) in profiles() {
        let hub = Hub::new(reg.with_uniform_links(&profile));
        let r = run_experiment(&hub, scenarios::demo(), &RunOptions::default()).map_err(|e| format!("{name}: {e}"))?;
        if r.state != RunState::Completed {
            return Err(format!("{name}: run ended {:?}", r.state));
        }
        hashes.push(r.trace_hash());
    }
    let same = hashes.iter().all(|h| *h == hashes[0]);
    check(same, format!("4 profiles, trace sha256 {}", if same { &hashes[0][..16] } else { "differ" }))
}

fn best_effort_latency() -> Outcome {
    let reg = scenarios::sites();
    let exp = scenarios::demo();
    let oracle = monolithic_oracle(&exp, &reg.model, OracleOptions::default()).map_err(|e| e.to_string())?.rows();
    let opts = RunOptions { mode: Some(SyncMode::BestEffort), ..Default::default() };
    let mut rms = Vec::new();
    for (name, profile) in profiles().into_iter().take(3) {
        let hub = Hub::new(reg.with_uniform_links(&profile));
        let r = run_experiment(&hub, exp.clone(), &opts).map_err(|e| format!("{name}: {e}"))?;
        let rows = parse_csv(&r.trace_csv).map_err(|e| e.to_string())?;
        let c = compare_traces(&rows, &oracle, None).map_err(|e| e.to_string())?;
        rms.push(c.rms());
    }
    let hub = Hub::new(reg.with_uniform_links(&link(200.0, 0.0, 0.0)));
    let r = run_experiment(&hub, exp.clone(), &opts).map_err(|e| e.to_string())?;
    let median = r.median_staleness_ns().ok_or("no staleness recorded")? as f64 / exp.macro_step_ns as f64;
    let increasing = rms.windows(2).all(|w| w[1] > w[0]);
    check(
        increasing && (median - 20.0).abs() <= 2.0,
        format!("rms 0/50/200 ms = {:.3}/{:.3}/{:.3}; median staleness {median} steps (20±2)", rms[0], rms[1], rms[2]),
    )
}

fn splitting_convergence() -> Outcome {
    let reg = scenarios::sites();
    let mut errs = Vec::new();
    for step in [10_000_000u64, 5_000_000, 2_500_000, 1_250_000] {
        let exp = scenarios::demo_with_step(step);
        let oracle = monolithic_oracle(&exp, &reg.model, OracleOptions::default()).map_err(|e| e.to_string())?;
        let r = run_experiment(&Hub::new(reg.clone()), exp, &RunOptions::default()).map_err(|e| e.to_string())?;
        let rows = parse_csv(&r.trace_csv).map_err(|e| e.to_string())?;
        errs.push(compare_traces(&rows, &oracle.rows(), None).map_err(|e| e.to_string())?.linf());
    }
    let ratios: Vec<f64> = errs.windows(2).map(|w| w[0] / w[1]).collect();
    let ok = ratios.iter().all(|r| (1.6..=2.4).contains(r));
    check(ok, format!("L∞ {errs:.4?}, ratios {ratios:.3?} in [1.6, 2.4]"))
}

fn waveform_relaxation() -> Outcome {
    let reg = scenarios::sites();
    let exp = scenarios::wr_coupled();
    let oracle = monolithic_oracle(&exp, &reg.model, OracleOptions::default()).map_err(|e| e.to_string())?;
    let r = run_experiment(&Hub::new(reg.clone()), exp.clone(), &RunOptions::default()).map_err(|e| e.to_string())?;
    let windows = exp.duration_ns / exp.wr.as_ref().unwrap().window_ns;
    let mut last: BTreeMap<u64, (u32, bool)> = BTreeMap::new();
    for row in &r.wr_log {
        last.insert(row.window_index, (row.iteration, row.converged));
    }
    let all_converged = last.len() as u64 == windows && last.values().all(|(it, ok)| *ok && *it <= 20);
    let worst_it = last.values().map(|(it, _)| *it).max().unwrap_or(0);
    let rows = parse_csv(&r.trace_csv).map_err(|e| e.to_string())?;
    let rel = compare_traces(&rows, &oracle.rows(), None).map_err(|e| e.to_string())?.relative_linf();

    let r0 =
        run_experiment(&Hub::new(reg), scenarios::wr_uncoupled(), &RunOptions::default()).map_err(|e| e.to_string())?;
    let mut iters: BTreeMap<u64, (u32, bool)> = BTreeMap::new();
    for row in &r0.wr_log {
        iters.insert(row.window_index, (row.iteration, row.converged));
    }
    let exactly_two = iters.len() as u64 == windows && iters.values().all(|v| *v == (2, true));
    check(
        all_converged && rel <= 1e-5 && exactly_two,
        format!(
            "{windows} windows converged (max {worst_it} iterations); relative L∞ {rel:.2e} (≤ 1e-5); \
             uncoupled: 2 iterations per window = {exactly_two}"
        ),
    )
}

/// Simulated loop outcome: stable iff the coupling error decays by three
/// orders of magnitude without overflowing.
fn simulated_verdict(rs: f64, rh: f64, delay: u32) -> Result<(Verdict, Vec<f64>), String> {
    let dev = PhilDevice { rh, lh: None };
    let out = simulate_itm_loop(rs, &dev, &PhilInterfaceConfig::pure_delay(delay), 400.0, 100_000, 1000)
        .map_err(|e| e.to_string())?;
    Ok(match out {
        LoopOutcome::Overflow { .. } => (Verdict::Unstable, Vec::new()),
        LoopOutcome::Bounded { errors } => {
            let peak = |s: &[f64]| s.iter().fold(0.0f64, |m, e| m.max(e.abs()));
            let head = peak(&errors[..100]);
            let tail = peak(&errors[900..]);
            let v = if tail < 1e-3 * head { Verdict::Stable } else { Verdict::Unstable };
            (v, errors)
        }
    })
}

fn phil_stability() -> Outcome {
    let rh = 10.0;
    let mut agree = 0;
    let mut disagreements = Vec::new();
    for ratio in [0.1, 0.5, 0.9, 1.1, 2.0, 10.0] {
        for delay in [1u32, 2, 5] {
            let predicted = itm_stability(ratio * rh, rh, delay).map_err(|e| e.to_string())?.verdict;
            let (simulated, _) = simulated_verdict(ratio * rh, rh, delay)?;
            if predicted == simulated {
                agree += 1;
            } else {
                disagreements.push(format!("{ratio}/{delay}"));
            }
        }
    }
    let (_, errors) = simulated_verdict(0.5 * rh, rh, 1)?;
    let ratios: Vec<f64> =
        errors.windows(2).take(20).filter(|w| w[0].abs() > 1e-9).map(|w| (w[1] / w[0]).abs()).collect();
    let decay = ratios.iter().sum::<f64>() / ratios.len().max(1) as f64;
    check(
        agree == 18 && (decay - 0.5).abs() <= 0.05,
        format!("{agree}/18 sweep points agree {disagreements:?}; decay ratio {decay:.4} (0.5±0.05)"),
    )
}

fn hil_placement() -> Outcome {
    let model = HilModel {
        device: HilDevice::Phil(PhilDevice { rh: 10.0, lh: None }),
        interface: PhilInterfaceConfig::pure_delay(1),
        ports: Some(PhilPorts { v_ref: "siteA.hil.v_ref".into(), i_meas: "siteA.hil.i_meas".into() }),
    };
    let mut source = SourceProfile::constant(400.0);
    source.sine = Some(fedlab_core::plant::grid::SourceSine { amplitude: 40.0, freq_hz: 5.0 });
    let coupling = Coupling::Itm(ItmCoupling { rs: 5.0, source });
    let mut opts = HilRunOptions {
        step_ns: 1_000_000,
        steps: 1000,
        deadline_ns: 10_000_000,
        pace: true,
        links: None,
        start_at_ideal: true,
    };
    let local = hil_run(&model, &coupling, &opts).map_err(|e| e.to_string())?;
    let mut wan = LinkModel::demo_70km();
    wan.seed = 1;
    let mut back = LinkModel::demo_70km();
    back.seed = 2;
    opts.links = Some(LoopLinks { to_device: wan, to_simulator: back });
    let remote = hil_run(&model, &coupling, &opts).map_err(|e| e.to_string())?;
    let (l_err, r_err) = (local.tracking_linf(), remote.tracking_linf());
    let (l_miss, r_miss) = (local.report.misses(), remote.report.misses());
    check(
        l_miss == 0 && r_miss > 0 && r_err >= 5.0 * l_err,
        format!(
            "local: {l_miss} misses, L∞ {l_err:.3} V; 70 km: {r_miss} misses, L∞ {r_err:.3} V ({:.1}×)",
            r_err / l_err
        ),
    )
}

fn causality() -> Outcome {
    let mut n = 0;
    for (name, profile) in profiles() {
        let hub = Hub::new(scenarios::sites().with_uniform_links(&profile));
        let exp = scenarios::demo();
        let r = run_experiment(&hub, exp.clone(), &RunOptions::default()).map_err(|e| format!("{name}: {e}"))?;
        n += r.violations(exp.macro_step_ns).len();
    }
    // Route 0 with one step of delay: the step starting at t consumes the
    // sample produced at t. The one produced at 20 ms arrives at 21 ms, one
    // millisecond after the step that used it began.
    let m = 10_000_000;
    let cons = [
        Consumption { route: 0, delay_steps: 1, used_at: m },
        Consumption { route: 0, delay_steps: 1, used_at: 2 * m },
    ];
    let arrivals = [
        Arrival { route: 0, produced_at: m, arrival: m },
        Arrival { route: 0, produced_at: 2 * m, arrival: 2 * m + 1_000_000 },
    ];
    let fixture = causality_check(&cons, &arrivals, m).len();
    check(n == 0 && fixture == 1, format!("conservative runs: {n} violations; fixture: {fixture} violation"))
}

fn information_model() -> Outcome {
    let reg = scenarios::sites();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut topic_errors = 0;
    let mut batch = Vec::with_capacity(10_000);
    let sites: Vec<_> = reg.sites.iter().map(|s| (s.id.clone(), s.table())).collect();
    for i in 0..10_000u64 {
        let (_, table) = &sites[rng.gen_range(0..sites.len())];
        let row = &table.rows[rng.gen_range(0..table.rows.len())];
        let value = rng.gen_range(-1e6..1e6) * 10f64.powi(rng.gen_range(-6..3));
        let local = SignalSample::real(&row.local, i * 1000, value, &row.unit, "scada", i);
        let c = to_canonical(&local, table, &reg.model).map_err(|e| e.to_string())?;
        let back = from_canonical(&c, table, &reg.model).map_err(|e| e.to_string())?;
        if back.topic != local.topic {
            topic_errors += 1;
        }
        let from = reg.model.unit(&row.unit).unwrap();
        let to = reg.model.entry_unit(&row.canonical).map_err(|e| e.to_string())?;
        let tol = ulp_scale_tolerance(value, from, to);
        let err = (back.value.as_real().unwrap() - value).abs();
        worst = worst.max(err / tol);
        if table.site_id == "siteB" {
            batch.push(local);
        }
    }
    while batch.len() < 10_000 {
        let row = &sites[1].1.rows[batch.len() % sites[1].1.rows.len()];
        let seq = 20_000 + batch.len() as u64;
        batch.push(SignalSample::real(&row.local, seq, 1.0, &row.unit, "scada", seq));
    }
    let hub = Hub::new(reg);
    let run = hub.create_run(scenarios::demo(), RunClock::Logical).map_err(|e| e.to_string())?;
    let first = hub.replicate(&run.id, "siteB", &batch).map_err(|e| e.to_string())?;
    let replay = hub.replicate(&run.id, "siteB", &batch).map_err(|e| e.to_string())?;
    check(
        topic_errors == 0 && worst <= 1.0 && first == 10_000 && replay == 0,
        format!(
            "10⁴ round trips: {topic_errors} topic errors, worst error {worst:.2} ulp-scale; \
             replication {first} rows, replay {replay} new rows"
        ),
    )
}

fn paas_gating() -> Outcome {
    let mut reg = scenarios::sites();
    reg.operators.push(OperatorConfig {
        id: "nobody".into(),
        site: "siteB".into(),
        token: "token-none".into(),
        commands: Some(Default::default()),
    });
    let hub = Hub::new(reg);
    let admin = hub.login("token-a").map_err(|e| e.to_string())?.id;
    hub.execute(&admin, Command::StartExperiment { experiment: Box::new(scenarios::demo()) })
        .map_err(|e| e.to_string())?;
    for r in hub.runs() {
        r.wait();
    }
    let idle = hub.login("token-none").map_err(|e| e.to_string())?.id;
    let run_id = hub.runs()[0].id.clone();
    let snapshot =
        |hub: &Hub| (hub.runs().iter().map(|r| (r.id.clone(), r.state())).collect::<Vec<_>>(), hub.store().hash());
    let before = snapshot(&hub);
    let mut denied = 0;
    for kind in CommandKind::ALL {
        let cmd = match kind {
            CommandKind::StartExperiment => Command::StartExperiment { experiment: Box::new(scenarios::demo()) },
            CommandKind::StopExperiment => Command::StopExperiment { run: Some(run_id.clone()) },
            CommandKind::SetValue => Command::SetValue {
                run: Some(run_id.clone()),
                topic: "siteB.der.p_set".into(),
                value: 5.0,
                unit: "kW".into(),
            },
            CommandKind::QueryTrace => Command::QueryTrace { filter: TraceFilter::run(&run_id) },
            CommandKind::GetStatus => Command::GetStatus { run: None },
            CommandKind::ListResources => Command::ListResources,
        };
        if matches!(hub.execute(&idle, cmd), Err(HubError::PermissionDenied(k)) if k == kind) {
            denied += 1;
        }
    }
    let after = snapshot(&hub);
    let n = CommandKind::ALL.len();
    check(
        denied == n && before == after,
        format!("{denied}/{n} kinds denied; run state and store hash unchanged: {}", before == after),
    )
}

#[derive(Deserialize)]
struct Expected {
    layer: Layer,
    code: String,
    severity: Severity,
}

#[derive(Deserialize)]
struct CorpusEntry {
    document: String,
    seeded: Expected,
    expected: Vec<Expected>,
}

fn validator_corpus() -> Outcome {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/validator");
    let manifest: Vec<CorpusEntry> =
        serde_json::from_str(&std::fs::read_to_string(dir.join("expected.json")).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let reg = scenarios::sites();
    let mut correct = 0;
    let mut layers = std::collections::BTreeSet::new();
    let mut wrong = Vec::new();
    for entry in &manifest {
        let text = std::fs::read_to_string(dir.join(&entry.document)).map_err(|e| e.to_string())?;
        let exp = parse_experiment(&text).map_err(|e| format!("{}: {e}", entry.document))?;
        let report = validate_layers(&exp, &reg);
        let mut got: Vec<(Layer, String, Severity)> =
            report.issues().map(|(l, i)| (l, i.code.clone(), i.severity)).collect();
        let mut want: Vec<(Layer, String, Severity)> =
            entry.expected.iter().map(|e| (e.layer, e.code.clone(), e.severity)).collect();
        got.sort();
        want.sort();
        let seeded = report.find(&entry.seeded.code).map(|(l, i)| (l, i.severity));
        if got == want && seeded == Some((entry.seeded.layer, entry.seeded.severity)) {
            correct += 1;
            layers.insert(entry.seeded.layer);
        } else {
            wrong.push(format!("{}: {got:?}", entry.document));
        }
    }
    check(
        correct == 10 && manifest.len() == 10 && layers.len() == Layer::ALL.len(),
        format!("{correct}/{} classified, {} layers covered {wrong:?}", manifest.len(), layers.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("conservative determinism", conservative_determinism),
        ("best-effort latency sensitivity", best_effort_latency),
        ("splitting-error convergence", splitting_convergence),
        ("waveform relaxation", waveform_relaxation),
        ("PHIL stability boundary", phil_stability),
        ("intra-platform HIL placement", hil_placement),
        ("causality", causality),
        ("information model", information_model),
        ("PaaS gating", paas_gating),
        ("validator corpus", validator_corpus),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let outcome = f();
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
