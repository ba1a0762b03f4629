//! Machine-readable experiment descriptions.
//!
//! An experiment wires participants of several sites together through routes,
//! drives them through a stage machine and fixes the synchronization mode.
//! [`parse_experiment`] checks structure, [`validate_layers`] checks everything
//! that needs the site registry, and [`StageMachine`] runs the stages.

mod parse;
mod stage;
mod validate;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::command::Command;
use crate::model::Nanos;
use crate::plant::ParticipantModel;

pub(crate) use parse::check_structure;
pub use parse::{parse_experiment, ParseError};
pub use stage::{StageError, StageMachine};
pub use validate::{validate_layers, Issue, Layer, Severity, ValidationReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    PowerContinuous,
    IctDiscreteEvent,
    HilRealtime,
    Controller,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParticipantDescriptor {
    pub id: String,
    pub site: String,
    pub kind: DomainKind,
    pub step_ns: Nanos,
    #[serde(default)]
    pub offers: Vec<String>,
    #[serde(default)]
    pub requires: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realtime_deadline_ns: Option<Nanos>,
    /// Input values used before anything has been received, canonical units.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub defaults: BTreeMap<String, f64>,
    /// Built-in model; participants without one join remotely.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ParticipantModel>,
}

impl ParticipantDescriptor {
    pub fn default_for(&self, topic: &str) -> f64 {
        self.defaults.get(topic).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Endpoint {
    pub participant: String,
    pub topic: String,
}

impl Endpoint {
    pub fn new(participant: &str, topic: &str) -> Self {
        Endpoint { participant: participant.to_string(), topic: topic.to_string() }
    }
}

fn one() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Route {
    pub from: Endpoint,
    pub to: Endpoint,
    /// Minimum coupling delay in macro steps.
    #[serde(default = "one")]
    pub delay_steps: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cmp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=")]
    Ge,
}

impl Cmp {
    pub fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Cmp::Lt => value < threshold,
            Cmp::Le => value <= threshold,
            Cmp::Gt => value > threshold,
            Cmp::Ge => value >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum Guard {
    /// Time since the stage was entered.
    Elapsed { elapsed_ns: Nanos },
    /// Comparison that must hold continuously for `hold_ns`.
    Threshold {
        topic: String,
        cmp: Cmp,
        threshold: f64,
        #[serde(default)]
        hold_ns: Nanos,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transition {
    pub guard: Guard,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Stage {
    pub id: String,
    #[serde(default)]
    pub entry_actions: Vec<Command>,
    #[serde(default)]
    pub transitions: Vec<Transition>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    Conservative,
    BestEffort,
    WaveformRelaxation,
}

impl SyncMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SyncMode::Conservative => "conservative",
            SyncMode::BestEffort => "best_effort",
            SyncMode::WaveformRelaxation => "waveform_relaxation",
        }
    }
}

impl std::str::FromStr for SyncMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "conservative" => Ok(SyncMode::Conservative),
            "best_effort" | "best-effort" => Ok(SyncMode::BestEffort),
            "waveform_relaxation" | "wr" => Ok(SyncMode::WaveformRelaxation),
            other => Err(format!("unknown sync mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WrScheme {
    #[default]
    Jacobi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WrConfig {
    pub window_ns: Nanos,
    /// L∞ threshold over exchanged waveforms, canonical units.
    pub tol: f64,
    pub max_iter: u32,
    #[serde(default)]
    pub scheme: WrScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentDescription {
    pub id: String,
    pub sites: Vec<String>,
    pub participants: Vec<ParticipantDescriptor>,
    #[serde(default)]
    pub routes: Vec<Route>,
    pub stages: Vec<Stage>,
    pub initial_stage: String,
    pub sync: SyncMode,
    pub macro_step_ns: Nanos,
    pub duration_ns: Nanos,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wr: Option<WrConfig>,
}

impl ExperimentDescription {
    pub fn participant(&self, id: &str) -> Option<&ParticipantDescriptor> {
        self.participants.iter().find(|p| p.id == id)
    }

    pub fn stage(&self, id: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.id == id)
    }

    pub fn macro_steps(&self) -> u64 {
        if self.macro_step_ns == 0 {
            0
        } else {
            self.duration_ns / self.macro_step_ns
        }
    }

    /// Site of a participant, if declared.
    pub fn site_of(&self, participant: &str) -> Option<&str> {
        self.participant(participant).map(|p| p.site.as_str())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("experiment serializes")
    }
}
