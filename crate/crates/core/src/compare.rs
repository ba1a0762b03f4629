//! Error metrics between two traces on the same time grid.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;
use thiserror::Error;

use crate::model::{Nanos, Value};
use crate::trace::TraceRow;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Rms,
    Linf,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rms" => Ok(Metric::Rms),
            "linf" => Ok(Metric::Linf),
            other => Err(format!("unknown metric `{other}` (rms, linf)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CompareError {
    #[error("GridMismatch on {topic}: {detail}")]
    GridMismatch { topic: String, detail: String },
    #[error("no common topic to compare")]
    NoCommonTopics,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TopicError {
    pub topic: String,
    pub points: usize,
    pub rms: f64,
    pub linf: f64,
    /// Largest magnitude in the reference trace.
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub topics: Vec<TopicError>,
}

impl Comparison {
    /// Pooled over all compared points.
    pub fn rms(&self) -> f64 {
        let n: usize = self.topics.iter().map(|t| t.points).sum();
        if n == 0 {
            return 0.0;
        }
        let ss: f64 = self.topics.iter().map(|t| t.rms * t.rms * t.points as f64).sum();
        (ss / n as f64).sqrt()
    }

    pub fn linf(&self) -> f64 {
        self.topics.iter().map(|t| t.linf).fold(0.0, f64::max)
    }

    /// Largest per-topic L∞ error relative to that topic's reference magnitude.
    pub fn relative_linf(&self) -> f64 {
        self.topics.iter().map(|t| if t.scale > 0.0 { t.linf / t.scale } else { t.linf }).fold(0.0, f64::max)
    }

    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Rms => self.rms(),
            Metric::Linf => self.linf(),
        }
    }
}

pub type Series = BTreeMap<String, BTreeMap<Nanos, f64>>;

/// Real-valued samples per topic.
pub fn series(rows: &[TraceRow]) -> Series {
    let mut out: Series = BTreeMap::new();
    for r in rows {
        if let Value::Real(v) = r.sample.value {
            out.entry(r.sample.topic.clone()).or_default().insert(r.sample.sim_time, v);
        }
    }
    out
}

/// Compares `actual` against `reference` topic by topic. Both traces must
/// sample each compared topic at exactly the same times. `topics` restricts
/// the comparison; otherwise every topic present in both is used.
pub fn compare_traces(
    actual: &[TraceRow],
    reference: &[TraceRow],
    topics: Option<&[String]>,
) -> Result<Comparison, CompareError> {
    let a = series(actual);
    let b = series(reference);
    let names: BTreeSet<String> = match topics {
        Some(t) => t.iter().cloned().collect(),
        None => a.keys().filter(|k| b.contains_key(*k)).cloned().collect(),
    };
    if names.is_empty() {
        return Err(CompareError::NoCommonTopics);
    }
    let mut out = Vec::new();
    for topic in names {
        let (Some(sa), Some(sb)) = (a.get(&topic), b.get(&topic)) else {
            return Err(CompareError::GridMismatch { topic, detail: "missing from one trace".into() });
        };
        if sa.len() != sb.len() || sa.keys().zip(sb.keys()).any(|(x, y)| x != y) {
            let first = sa.keys().zip(sb.keys()).find(|(x, y)| x != y);
            let detail = match first {
                Some((x, y)) => format!("time {x} vs {y}"),
                None => format!("{} vs {} samples", sa.len(), sb.len()),
            };
            return Err(CompareError::GridMismatch { topic, detail });
        }
        let (mut ss, mut linf, mut scale) = (0.0, 0.0f64, 0.0f64);
        for (x, y) in sa.values().zip(sb.values()) {
            let d = x - y;
            ss += d * d;
            linf = linf.max(d.abs());
            scale = scale.max(y.abs());
        }
        let n = sa.len();
        out.push(TopicError { topic, points: n, rms: (ss / n.max(1) as f64).sqrt(), linf, scale });
    }
    Ok(Comparison { topics: out })
}
