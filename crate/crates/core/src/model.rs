//! Canonical information model, per-site mapping tables and sample translation.
//!
//! The canonical model is a flat registry of dot-path topics (for example
//! `siteA.feeder1.busB.voltage`), each carrying a kind, a unit and a value
//! domain. Sites keep their own local names and units; a [`MappingTable`]
//! translates between the two namespaces in both directions.

use std::collections::{HashMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Simulation time in nanoseconds.
pub type Nanos = u64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unmapped topic `{0}`")]
    UnmappedTopic(String),
    #[error("incompatible unit: `{from}` cannot be expressed in `{to}`")]
    IncompatibleUnit { from: String, to: String },
    #[error("unknown unit `{0}`")]
    UnknownUnit(String),
    #[error("unknown canonical entry `{0}`")]
    UnknownEntry(String),
    #[error("invalid document: {0}")]
    Document(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitDef {
    pub symbol: String,
    #[serde(rename = "base")]
    pub base_symbol: String,
    pub scale: f64,
    #[serde(default)]
    pub offset: f64,
}

impl UnitDef {
    pub fn base(symbol: &str) -> Self {
        Self::derived(symbol, symbol, 1.0, 0.0)
    }

    pub fn derived(symbol: &str, base: &str, scale: f64, offset: f64) -> Self {
        UnitDef { symbol: symbol.to_string(), base_symbol: base.to_string(), scale, offset }
    }

    pub fn is_base(&self) -> bool {
        self.symbol == self.base_symbol
    }

    pub fn to_base(&self, value: f64) -> f64 {
        value * self.scale + self.offset
    }

    pub fn from_base(&self, value: f64) -> f64 {
        (value - self.offset) / self.scale
    }

    pub fn compatible_with(&self, other: &UnitDef) -> bool {
        self.base_symbol == other.base_symbol
    }
}

/// Converts `value` from unit `from` into unit `to` through the shared base unit.
pub fn convert(value: f64, from: &UnitDef, to: &UnitDef) -> Result<f64, ModelError> {
    if !from.compatible_with(to) {
        return Err(ModelError::IncompatibleUnit { from: from.symbol.clone(), to: to.symbol.clone() });
    }
    if from.symbol == to.symbol {
        return Ok(value);
    }
    Ok(to.from_base(from.to_base(value)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    Measurement,
    Setpoint,
    Status,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueDomain {
    Real,
    Boolean,
    Enumeration(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalEntry {
    pub name: String,
    pub kind: EntryKind,
    /// Unit symbol, resolved against the model's unit registry.
    pub unit: String,
    pub domain: ValueDomain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CanonicalModel {
    pub version: String,
    pub units: Vec<UnitDef>,
    pub entries: Vec<CanonicalEntry>,
}

/// One invariant violation found by [`validate_model`] or [`validate_table`].
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ModelIssue {
    pub code: String,
    pub subject: String,
}

impl ModelIssue {
    pub fn new(code: &str, subject: impl Into<String>) -> Self {
        ModelIssue { code: code.to_string(), subject: subject.into() }
    }
}

impl fmt::Display for ModelIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.code, self.subject)
    }
}

/// True for non-empty dot paths whose segments are non-empty identifiers.
pub fn is_topic_path(name: &str) -> bool {
    !name.is_empty()
        && name
            .split('.')
            .all(|seg| !seg.is_empty() && seg.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-'))
}

impl CanonicalModel {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Document(e.to_string()))
    }

    pub fn unit(&self, symbol: &str) -> Option<&UnitDef> {
        self.units.iter().find(|u| u.symbol == symbol)
    }

    pub fn entry(&self, name: &str) -> Option<&CanonicalEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn entry_unit(&self, name: &str) -> Result<&UnitDef, ModelError> {
        let entry = self.entry(name).ok_or_else(|| ModelError::UnknownEntry(name.to_string()))?;
        self.unit(&entry.unit).ok_or_else(|| ModelError::UnknownUnit(entry.unit.clone()))
    }
}

/// Lists every invariant violation of `model`, sorted so that the result does
/// not depend on the order of units or entries.
pub fn validate_model(model: &CanonicalModel) -> Vec<ModelIssue> {
    let mut issues = Vec::new();

    let mut unit_seen = HashSet::new();
    for unit in &model.units {
        if !unit_seen.insert(unit.symbol.as_str()) {
            issues.push(ModelIssue::new("duplicate-unit", &unit.symbol));
        }
        if !(unit.scale > 0.0) || !unit.scale.is_finite() || !unit.offset.is_finite() {
            issues.push(ModelIssue::new("invalid-scale", &unit.symbol));
        }
        if unit.is_base() && (unit.scale != 1.0 || unit.offset != 0.0) {
            issues.push(ModelIssue::new("invalid-base-unit", &unit.symbol));
        }
        if !unit.is_base() && !model.units.iter().any(|u| u.symbol == unit.base_symbol && u.is_base()) {
            issues.push(ModelIssue::new("unknown-base-unit", &unit.base_symbol));
        }
    }

    let mut name_count: HashMap<&str, usize> = HashMap::new();
    for entry in &model.entries {
        *name_count.entry(entry.name.as_str()).or_default() += 1;
        if !is_topic_path(&entry.name) {
            issues.push(ModelIssue::new("invalid-name", &entry.name));
        }
        if model.unit(&entry.unit).is_none() {
            issues.push(ModelIssue::new("unknown-unit", &entry.unit));
        }
        if let ValueDomain::Enumeration(labels) = &entry.domain {
            if labels.is_empty() {
                issues.push(ModelIssue::new("empty-enumeration", &entry.name));
            }
        }
    }
    for (name, count) in name_count {
        for _ in 1..count {
            issues.push(ModelIssue::new("duplicate-name", name));
        }
    }

    issues.sort();
    issues
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingRow {
    pub local: String,
    pub canonical: String,
    /// Local unit symbol.
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingTable {
    #[serde(rename = "site")]
    pub site_id: String,
    pub rows: Vec<MappingRow>,
}

impl MappingTable {
    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::Document(e.to_string()))
    }

    pub fn by_local(&self, local: &str) -> Option<&MappingRow> {
        self.rows.iter().find(|r| r.local == local)
    }

    pub fn by_canonical(&self, canonical: &str) -> Option<&MappingRow> {
        self.rows.iter().find(|r| r.canonical == canonical)
    }
}

/// Checks bijectivity and unit compatibility of a site table against `model`.
pub fn validate_table(table: &MappingTable, model: &CanonicalModel) -> Vec<ModelIssue> {
    let mut issues = Vec::new();
    let mut locals = HashSet::new();
    let mut canonicals = HashSet::new();
    for row in &table.rows {
        if !locals.insert(row.local.as_str()) {
            issues.push(ModelIssue::new("duplicate-local", &row.local));
        }
        if !canonicals.insert(row.canonical.as_str()) {
            issues.push(ModelIssue::new("duplicate-canonical", &row.canonical));
        }
        let local_unit = model.unit(&row.unit);
        if local_unit.is_none() {
            issues.push(ModelIssue::new("unknown-unit", &row.unit));
        }
        match model.entry_unit(&row.canonical) {
            Err(ModelError::UnknownEntry(_)) => issues.push(ModelIssue::new("unknown-canonical", &row.canonical)),
            Err(_) => {}
            Ok(canon_unit) => {
                if let Some(lu) = local_unit {
                    if !lu.compatible_with(canon_unit) {
                        issues.push(ModelIssue::new(
                            "incompatible-unit",
                            format!("{}:{}->{}", row.local, lu.symbol, canon_unit.symbol),
                        ));
                    }
                }
            }
        }
    }
    issues.sort();
    issues
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Bool(bool),
    Real(f64),
    Label(String),
}

impl Value {
    pub fn as_real(&self) -> Option<f64> {
        match self {
            Value::Real(v) => Some(*v),
            _ => None,
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Real(v) => write!(f, "{v}"),
            Value::Bool(b) => write!(f, "{b}"),
            Value::Label(l) => f.write_str(l),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    Good,
    Stale,
    Estimated,
    Bad,
}

impl Quality {
    pub fn as_str(self) -> &'static str {
        match self {
            Quality::Good => "good",
            Quality::Stale => "stale",
            Quality::Estimated => "estimated",
            Quality::Bad => "bad",
        }
    }
}

impl std::str::FromStr for Quality {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "good" => Ok(Quality::Good),
            "stale" => Ok(Quality::Stale),
            "estimated" => Ok(Quality::Estimated),
            "bad" => Ok(Quality::Bad),
            other => Err(ModelError::Document(format!("unknown quality `{other}`"))),
        }
    }
}

/// One timestamped, unit-carrying value on a named topic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSample {
    pub topic: String,
    pub sim_time: Nanos,
    pub value: Value,
    /// Unit symbol.
    pub unit: String,
    pub quality: Quality,
    pub source: String,
    pub seq: u64,
}

impl SignalSample {
    pub fn real(topic: &str, sim_time: Nanos, value: f64, unit: &str, source: &str, seq: u64) -> Self {
        SignalSample {
            topic: topic.to_string(),
            sim_time,
            value: Value::Real(value),
            unit: unit.to_string(),
            quality: Quality::Good,
            source: source.to_string(),
            seq,
        }
    }
}

fn translate(sample: &SignalSample, topic: &str, from: &UnitDef, to: &UnitDef) -> Result<SignalSample, ModelError> {
    let value = match &sample.value {
        Value::Real(v) => Value::Real(convert(*v, from, to)?),
        other => {
            if !from.compatible_with(to) {
                return Err(ModelError::IncompatibleUnit { from: from.symbol.clone(), to: to.symbol.clone() });
            }
            other.clone()
        }
    };
    Ok(SignalSample { topic: topic.to_string(), value, unit: to.symbol.clone(), ..sample.clone() })
}

fn sample_unit<'m>(
    sample: &SignalSample,
    declared: &str,
    model: &'m CanonicalModel,
) -> Result<&'m UnitDef, ModelError> {
    let symbol = if sample.unit.is_empty() { declared } else { sample.unit.as_str() };
    model.unit(symbol).ok_or_else(|| ModelError::UnknownUnit(symbol.to_string()))
}

/// Translates a site-local sample into the canonical namespace and unit.
pub fn to_canonical(
    sample: &SignalSample,
    table: &MappingTable,
    model: &CanonicalModel,
) -> Result<SignalSample, ModelError> {
    let row = table.by_local(&sample.topic).ok_or_else(|| ModelError::UnmappedTopic(sample.topic.clone()))?;
    let from = sample_unit(sample, &row.unit, model)?;
    let to = model.entry_unit(&row.canonical)?;
    translate(sample, &row.canonical, from, to)
}

/// Inverse of [`to_canonical`]: canonical sample back into the site's local name and unit.
pub fn from_canonical(
    sample: &SignalSample,
    table: &MappingTable,
    model: &CanonicalModel,
) -> Result<SignalSample, ModelError> {
    let row = table.by_canonical(&sample.topic).ok_or_else(|| ModelError::UnmappedTopic(sample.topic.clone()))?;
    let canonical_unit = model.entry_unit(&row.canonical)?;
    let from = sample_unit(sample, &canonical_unit.symbol, model)?;
    let to = model.unit(&row.unit).ok_or_else(|| ModelError::UnknownUnit(row.unit.clone()))?;
    translate(sample, &row.local, from, to)
}

/// Magnitude-scaled rounding bound used when comparing translated values:
/// one unit in the last place of the largest intermediate magnitude of the
/// conversion chain `value -> base -> canonical -> base -> value`.
pub fn ulp_scale_tolerance(value: f64, from: &UnitDef, to: &UnitDef) -> f64 {
    let base = from.to_base(value);
    let there = to.from_base(base);
    let magnitude = [value, base, there, from.offset, to.offset].iter().fold(0.0f64, |m, v| m.max(v.abs()));
    ulp(magnitude)
}

/// Spacing between `x` and the next larger representable f64 (for finite, non-negative `x`).
pub fn ulp(x: f64) -> f64 {
    let x = x.abs();
    if x == 0.0 {
        return f64::MIN_POSITIVE;
    }
    f64::from_bits(x.to_bits() + 1) - x
}
