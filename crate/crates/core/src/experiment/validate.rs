//! Five-layer cross-infrastructure validation.
//!
//! | layer      | concern                                                        |
//! |------------|----------------------------------------------------------------|
//! | conceptual | ids resolve, stages and duration exist, models fit descriptors |
//! | semantical | stage machine well-formed, guard and setpoint topics meaningful |
//! | syntactic  | mapping rows and unit compatibility of everything exchanged    |
//! | dynamic    | step divisibility, zero-delay cycles, relaxation windows       |
//! | technical  | HIL placement and link latency against real-time deadlines     |

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::command::Command;
use crate::model::EntryKind;
use crate::registry::Registry;

use super::{DomainKind, ExperimentDescription, Guard, SyncMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    Conceptual,
    Semantical,
    Syntactic,
    Dynamic,
    Technical,
}

impl Layer {
    pub const ALL: [Layer; 5] =
        [Layer::Conceptual, Layer::Semantical, Layer::Syntactic, Layer::Dynamic, Layer::Technical];

    pub fn as_str(self) -> &'static str {
        match self {
            Layer::Conceptual => "conceptual",
            Layer::Semantical => "semantical",
            Layer::Syntactic => "syntactic",
            Layer::Dynamic => "dynamic",
            Layer::Technical => "technical",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Issue {
    pub severity: Severity,
    pub code: String,
    pub location: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sev = match self.severity {
            Severity::Error => "error",
            Severity::Warning => "warning",
        };
        write!(f, "{sev} {} at {}: {}", self.code, self.location, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub conceptual: Vec<Issue>,
    pub semantical: Vec<Issue>,
    pub syntactic: Vec<Issue>,
    pub dynamic: Vec<Issue>,
    pub technical: Vec<Issue>,
}

impl ValidationReport {
    pub fn layer(&self, layer: Layer) -> &[Issue] {
        match layer {
            Layer::Conceptual => &self.conceptual,
            Layer::Semantical => &self.semantical,
            Layer::Syntactic => &self.syntactic,
            Layer::Dynamic => &self.dynamic,
            Layer::Technical => &self.technical,
        }
    }

    fn layer_mut(&mut self, layer: Layer) -> &mut Vec<Issue> {
        match layer {
            Layer::Conceptual => &mut self.conceptual,
            Layer::Semantical => &mut self.semantical,
            Layer::Syntactic => &mut self.syntactic,
            Layer::Dynamic => &mut self.dynamic,
            Layer::Technical => &mut self.technical,
        }
    }

    pub fn issues(&self) -> impl Iterator<Item = (Layer, &Issue)> {
        Layer::ALL.into_iter().flat_map(move |l| self.layer(l).iter().map(move |i| (l, i)))
    }

    pub fn errors(&self) -> usize {
        self.issues().filter(|(_, i)| i.severity == Severity::Error).count()
    }

    pub fn warnings(&self) -> usize {
        self.issues().filter(|(_, i)| i.severity == Severity::Warning).count()
    }

    pub fn is_valid(&self) -> bool {
        self.errors() == 0
    }

    /// Layer and severity of the first issue with `code`.
    pub fn find(&self, code: &str) -> Option<(Layer, &Issue)> {
        self.issues().find(|(_, i)| i.code == code)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for layer in Layer::ALL {
            let issues = self.layer(layer);
            if issues.is_empty() {
                out.push_str(&format!("{:<11} ok\n", layer.as_str()));
            } else {
                out.push_str(&format!("{:<11} {} issue(s)\n", layer.as_str(), issues.len()));
                for i in issues {
                    out.push_str(&format!("  {i}\n"));
                }
            }
        }
        out.push_str(&format!("{} error(s), {} warning(s)\n", self.errors(), self.warnings()));
        out
    }
}

struct Collector {
    report: ValidationReport,
}

impl Collector {
    fn push(
        &mut self,
        layer: Layer,
        severity: Severity,
        code: &str,
        location: impl Into<String>,
        message: impl Into<String>,
    ) {
        self.report.layer_mut(layer).push(Issue {
            severity,
            code: code.to_string(),
            location: location.into(),
            message: message.into(),
        });
    }

    fn error(&mut self, layer: Layer, code: &str, location: impl Into<String>, message: impl Into<String>) {
        self.push(layer, Severity::Error, code, location, message);
    }

    fn warn(&mut self, layer: Layer, code: &str, location: impl Into<String>, message: impl Into<String>) {
        self.push(layer, Severity::Warning, code, location, message);
    }
}

/// Message attached to `hil-inter-site` warnings.
pub const HIL_INTRA_PLATFORM: &str =
    "keep the HIL interface intra-platform: the power interface loop is latency-critical, \
     exchange only non-critical signals across sites";

/// Checks `exp` against the site registry. The report is deterministic: each
/// layer's issues are sorted.
pub fn validate_layers(exp: &ExperimentDescription, reg: &Registry) -> ValidationReport {
    let mut c = Collector { report: ValidationReport::default() };
    conceptual(exp, reg, &mut c);
    semantical(exp, reg, &mut c);
    syntactic(exp, reg, &mut c);
    dynamic(exp, &mut c);
    technical(exp, reg, &mut c);
    for layer in Layer::ALL {
        c.report.layer_mut(layer).sort();
    }
    c.report
}

fn model_kind_fits(kind: DomainKind, model: &str) -> bool {
    match model {
        "grid" | "der" | "linear" => {
            matches!(kind, DomainKind::PowerContinuous | DomainKind::Controller)
        }
        "controller" => matches!(kind, DomainKind::Controller | DomainKind::PowerContinuous),
        "ict" => kind == DomainKind::IctDiscreteEvent,
        "hil" => kind == DomainKind::HilRealtime,
        _ => false,
    }
}

fn conceptual(exp: &ExperimentDescription, reg: &Registry, c: &mut Collector) {
    use Layer::Conceptual as L;
    let declared: BTreeSet<&str> = exp.sites.iter().map(String::as_str).collect();
    for s in &exp.sites {
        if reg.site(s).is_none() {
            c.error(L, "unknown-site", format!("sites/{s}"), format!("site `{s}` is not configured"));
        }
    }
    for p in &exp.participants {
        let loc = format!("participants/{}", p.id);
        if !declared.contains(p.site.as_str()) {
            c.error(L, "unknown-site", &loc, format!("site `{}` is not declared by the experiment", p.site));
        }
        if p.kind == DomainKind::HilRealtime && p.realtime_deadline_ns.is_none() {
            c.error(L, "missing-deadline", &loc, "hil_realtime participants need realtime_deadline_ns");
        }
        match &p.model {
            None => c.warn(L, "no-model", &loc, "no built-in model; the participant must join remotely"),
            Some(m) => {
                if let Err(e) = m.check() {
                    c.error(L, "invalid-model", &loc, e.to_string());
                }
                if !model_kind_fits(p.kind, m.type_name()) {
                    c.error(L, "kind-mismatch", &loc, format!("model `{}` cannot act as {:?}", m.type_name(), p.kind));
                }
                let outs: BTreeSet<String> = m.output_ports().into_iter().map(|p| p.topic).collect();
                let ins: BTreeSet<String> = m.input_ports().into_iter().map(|p| p.topic).collect();
                let offers: BTreeSet<String> = p.offers.iter().cloned().collect();
                let requires: BTreeSet<String> = p.requires.iter().cloned().collect();
                if outs != offers || ins != requires {
                    c.error(L, "port-mismatch", &loc, "offers/requires differ from the model's output/input ports");
                }
            }
        }
    }
    let mut fed: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for (i, r) in exp.routes.iter().enumerate() {
        let loc = format!("routes/{i}");
        match exp.participant(&r.from.participant) {
            None => c.error(L, "unknown-participant", &loc, format!("`{}` is not declared", r.from.participant)),
            Some(p) if !p.offers.contains(&r.from.topic) => {
                c.error(L, "unknown-route-topic", &loc, format!("`{}` does not offer `{}`", p.id, r.from.topic))
            }
            _ => {}
        }
        match exp.participant(&r.to.participant) {
            None => c.error(L, "unknown-participant", &loc, format!("`{}` is not declared", r.to.participant)),
            Some(p) if !p.requires.contains(&r.to.topic) => {
                c.error(L, "unknown-route-topic", &loc, format!("`{}` does not require `{}`", p.id, r.to.topic))
            }
            _ => {}
        }
        if r.from == r.to {
            c.error(L, "self-route", &loc, "route endpoints are identical");
        }
        *fed.entry((r.to.participant.as_str(), r.to.topic.as_str())).or_default() += 1;
    }
    for ((p, t), n) in fed {
        if n > 1 {
            c.error(L, "duplicate-input", format!("participants/{p}"), format!("`{t}` is fed by {n} routes"));
        }
    }
    if exp.stages.is_empty() {
        c.error(L, "no-stages", "stages", "at least one stage is required");
    }
    if exp.duration_ns == 0 {
        c.error(L, "no-duration", "duration_ns", "duration must be set");
    }
    if exp.macro_step_ns == 0 {
        c.error(L, "invalid-macro-step", "macro_step_ns", "macro step must be positive");
    }
    if exp.sync == SyncMode::WaveformRelaxation && exp.wr.is_none() {
        c.error(L, "missing-wr-config", "wr", "waveform relaxation needs a `wr` block");
    }
}

fn semantical(exp: &ExperimentDescription, reg: &Registry, c: &mut Collector) {
    use Layer::Semantical as L;
    let ids: BTreeSet<&str> = exp.stages.iter().map(|s| s.id.as_str()).collect();
    if !ids.contains(exp.initial_stage.as_str()) {
        c.error(L, "unknown-initial-stage", "initial_stage", format!("no stage `{}`", exp.initial_stage));
    }
    let offered: BTreeSet<&str> = exp.participants.iter().flat_map(|p| p.offers.iter().map(String::as_str)).collect();
    let required: BTreeSet<&str> =
        exp.participants.iter().flat_map(|p| p.requires.iter().map(String::as_str)).collect();
    let mut set_topics: BTreeSet<&str> = BTreeSet::new();
    for s in &exp.stages {
        for (i, tr) in s.transitions.iter().enumerate() {
            let loc = format!("stages/{}/transitions/{i}", s.id);
            if !ids.contains(tr.target.as_str()) {
                c.error(L, "unknown-stage-target", &loc, format!("no stage `{}`", tr.target));
            }
            if let Guard::Threshold { topic, .. } = &tr.guard {
                if !offered.contains(topic.as_str()) {
                    c.error(L, "unknown-guard-topic", &loc, format!("no participant offers `{topic}`"));
                }
            }
        }
        for (i, a) in s.entry_actions.iter().enumerate() {
            let loc = format!("stages/{}/entry_actions/{i}", s.id);
            match a {
                Command::SetValue { topic, .. } => {
                    set_topics.insert(topic);
                    match reg.model.entry(topic) {
                        Some(e) if e.kind == EntryKind::Setpoint => {
                            if !required.contains(topic.as_str()) {
                                c.warn(L, "unconsumed-setpoint", &loc, format!("no participant requires `{topic}`"));
                            }
                        }
                        _ => c.error(L, "not-a-setpoint", &loc, format!("`{topic}` is not a canonical setpoint")),
                    }
                }
                Command::StopExperiment { .. } => {}
                other => {
                    c.error(L, "invalid-stage-action", &loc, format!("`{}` cannot be a stage action", other.kind()))
                }
            }
        }
    }
    // Reachability from the initial stage.
    if ids.contains(exp.initial_stage.as_str()) {
        let mut seen: BTreeSet<&str> = BTreeSet::from([exp.initial_stage.as_str()]);
        let mut stack = vec![exp.initial_stage.as_str()];
        while let Some(id) = stack.pop() {
            if let Some(s) = exp.stage(id) {
                for tr in &s.transitions {
                    if ids.contains(tr.target.as_str()) && seen.insert(tr.target.as_str()) {
                        stack.push(tr.target.as_str());
                    }
                }
            }
        }
        for s in &exp.stages {
            if !seen.contains(s.id.as_str()) {
                c.error(L, "unreachable-stage", format!("stages/{}", s.id), "not reachable from the initial stage");
            }
        }
    }
    // Inputs nobody feeds: neither routed nor a setpoint.
    let routed: BTreeSet<(&str, &str)> =
        exp.routes.iter().map(|r| (r.to.participant.as_str(), r.to.topic.as_str())).collect();
    for p in &exp.participants {
        for t in &p.requires {
            let is_setpoint = reg.model.entry(t).is_some_and(|e| e.kind == EntryKind::Setpoint);
            if !routed.contains(&(p.id.as_str(), t.as_str())) && !is_setpoint {
                c.warn(
                    L,
                    "unrouted-input",
                    format!("participants/{}", p.id),
                    format!("`{t}` is never delivered; default used"),
                );
            }
        }
    }
}

fn syntactic(exp: &ExperimentDescription, reg: &Registry, c: &mut Collector) {
    use Layer::Syntactic as L;
    let model = &reg.model;
    for p in &exp.participants {
        let loc = format!("participants/{}", p.id);
        for t in p.offers.iter().chain(&p.requires) {
            if model.entry(t).is_none() {
                c.error(L, "unknown-canonical", &loc, format!("`{t}` is not in the canonical model"));
            }
        }
        if let Some(m) = &p.model {
            for port in m.input_ports().into_iter().chain(m.output_ports()) {
                let (Ok(canon), Some(pu)) = (model.entry_unit(&port.topic), model.unit(&port.unit)) else {
                    if model.entry(&port.topic).is_some() {
                        c.error(
                            L,
                            "port-unit-mismatch",
                            &loc,
                            format!("unit `{}` of `{}` is not registered", port.unit, port.topic),
                        );
                    }
                    continue;
                };
                if !canon.compatible_with(pu) {
                    c.error(
                        L,
                        "port-unit-mismatch",
                        &loc,
                        format!("`{}` is computed in {} but canonical unit is {}", port.topic, pu.symbol, canon.symbol),
                    );
                }
            }
        }
    }
    for (i, r) in exp.routes.iter().enumerate() {
        let loc = format!("routes/{i}");
        for (ep, what) in [(&r.from, "producer"), (&r.to, "consumer")] {
            let Some(site) = exp.site_of(&ep.participant).and_then(|s| reg.site(s)) else {
                continue;
            };
            if site.mapping.iter().all(|row| row.canonical != ep.topic) {
                c.error(
                    L,
                    "unmapped-topic",
                    &loc,
                    format!("{what} site `{}` has no mapping row for `{}`", site.id, ep.topic),
                );
            }
        }
        if let (Ok(a), Ok(b)) = (model.entry_unit(&r.from.topic), model.entry_unit(&r.to.topic)) {
            if !a.compatible_with(b) {
                c.error(L, "unit-mismatch", &loc, format!("{} cannot be converted to {}", a.symbol, b.symbol));
            }
        }
    }
    for s in &exp.stages {
        for (i, a) in s.entry_actions.iter().enumerate() {
            if let Command::SetValue { topic, unit, .. } = a {
                let loc = format!("stages/{}/entry_actions/{i}", s.id);
                match (model.entry_unit(topic), model.unit(unit)) {
                    (Ok(canon), Some(u)) if !canon.compatible_with(u) => c.error(
                        L,
                        "unit-mismatch",
                        &loc,
                        format!("{} cannot be converted to {}", u.symbol, canon.symbol),
                    ),
                    (Ok(_), None) => c.error(L, "unknown-unit", &loc, format!("unit `{unit}` is not registered")),
                    _ => {}
                }
            }
        }
    }
}

/// Participants on a cycle of zero-delay routes, sorted; empty if acyclic.
pub(crate) fn zero_delay_cycle(exp: &ExperimentDescription) -> Vec<String> {
    let mut out: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    let mut indeg: BTreeMap<&str, usize> = exp.participants.iter().map(|p| (p.id.as_str(), 0)).collect();
    for r in exp.routes.iter().filter(|r| r.delay_steps == 0) {
        let (a, b) = (r.from.participant.as_str(), r.to.participant.as_str());
        if !indeg.contains_key(a) || !indeg.contains_key(b) {
            continue;
        }
        if out.entry(a).or_default().insert(b) {
            *indeg.get_mut(b).expect("present") += 1;
        }
    }
    let mut ready: Vec<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(p, _)| *p).collect();
    while let Some(p) = ready.pop() {
        indeg.remove(p);
        for q in out.get(p).into_iter().flatten() {
            if let Some(d) = indeg.get_mut(q) {
                *d -= 1;
                if *d == 0 {
                    ready.push(q);
                }
            }
        }
    }
    indeg.keys().map(|s| s.to_string()).collect()
}

fn dynamic(exp: &ExperimentDescription, c: &mut Collector) {
    use Layer::Dynamic as L;
    for p in &exp.participants {
        if p.step_ns == 0 || exp.macro_step_ns % p.step_ns != 0 {
            c.error(
                L,
                "step-not-divisor",
                format!("participants/{}", p.id),
                format!("macro step {} ns is not a multiple of step {} ns", exp.macro_step_ns, p.step_ns),
            );
        }
    }
    if exp.macro_step_ns > 0 && exp.duration_ns % exp.macro_step_ns != 0 {
        c.error(L, "duration-not-multiple", "duration_ns", "duration is not a multiple of the macro step");
    }
    match exp.sync {
        SyncMode::WaveformRelaxation => {
            if let Some(wr) = &exp.wr {
                if exp.macro_step_ns == 0 || wr.window_ns == 0 || wr.window_ns % exp.macro_step_ns != 0 {
                    c.error(
                        L,
                        "wr-window-not-multiple",
                        "wr/window_ns",
                        "window must be a positive multiple of the macro step",
                    );
                } else if exp.duration_ns % wr.window_ns != 0 {
                    c.error(L, "wr-window-not-multiple", "wr/window_ns", "duration must be a multiple of the window");
                }
                if !(wr.tol > 0.0) || wr.max_iter == 0 {
                    c.error(L, "invalid-wr", "wr", "tol must be positive and max_iter at least 1");
                }
            }
            for p in &exp.participants {
                let loc = format!("participants/{}", p.id);
                if p.kind == DomainKind::HilRealtime {
                    c.error(L, "hil-in-wr-loop", &loc, "real-time devices cannot repeat a window");
                } else if p.model.is_none() {
                    c.error(L, "wr-requires-builtin", &loc, "relaxation needs rewindable built-in models");
                }
            }
        }
        _ => {
            let cycle = zero_delay_cycle(exp);
            if !cycle.is_empty() {
                c.error(L, "zero-delay-cycle", cycle.join(","), "routes with delay_steps = 0 form a cycle");
            }
        }
    }
}

fn technical(exp: &ExperimentDescription, reg: &Registry, c: &mut Collector) {
    use Layer::Technical as L;
    for (i, r) in exp.routes.iter().enumerate() {
        let (Some(a), Some(b)) = (exp.participant(&r.from.participant), exp.participant(&r.to.participant)) else {
            continue;
        };
        if a.site == b.site {
            continue;
        }
        let loc = format!("routes/{i}");
        let link = reg.link_spec(&a.site, &b.site);
        match link {
            None => {
                if reg.site(&a.site).is_some() && reg.site(&b.site).is_some() {
                    c.error(L, "missing-link", &loc, format!("no link between `{}` and `{}`", a.site, b.site));
                }
            }
            Some(l) if !l.is_valid() => c.error(L, "invalid-link", &loc, "link parameters out of range"),
            Some(l) => {
                let worst = l.to_model(0).worst_case_delay();
                for p in [a, b] {
                    if p.kind != DomainKind::HilRealtime {
                        continue;
                    }
                    c.warn(L, "hil-inter-site", &loc, format!("`{}`: {HIL_INTRA_PLATFORM}", p.id));
                    if let Some(deadline) = p.realtime_deadline_ns {
                        if worst > deadline {
                            c.error(
                                L,
                                "deadline-exceeded",
                                &loc,
                                format!("worst-case link delay {worst} ns exceeds `{}` deadline {deadline} ns", p.id),
                            );
                        }
                    }
                }
                if l.loss >= 1.0 && exp.sync == SyncMode::Conservative {
                    c.error(L, "dead-link", &loc, "a link that loses everything blocks the barrier");
                }
            }
        }
    }
}
