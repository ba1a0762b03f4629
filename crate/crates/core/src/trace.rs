//! Trace CSV format shared by runs, the oracle and `fedrun compare`.

use std::fmt::Write as _;

use sha2::{Digest, Sha256};

use crate::model::{Nanos, Quality, SignalSample, Value};

pub const TRACE_HEADER: &str = "sim_time_ns,topic,value,unit,quality,source,seq,wall_time_ns";

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub sample: SignalSample,
    pub wall_time_ns: Nanos,
}

/// Canonical export order: time, then source, then sequence, then topic.
pub fn sort_rows(rows: &mut [TraceRow]) {
    rows.sort_by(|a, b| {
        let (x, y) = (&a.sample, &b.sample);
        (x.sim_time, &x.source, x.seq, &x.topic).cmp(&(y.sim_time, &y.source, y.seq, &y.topic))
    });
}

fn field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Rows are written in the given order.
pub fn write_csv<'a>(rows: impl IntoIterator<Item = &'a TraceRow>) -> String {
    let mut out = String::from(TRACE_HEADER);
    out.push('\n');
    for r in rows {
        let s = &r.sample;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            s.sim_time,
            field(&s.topic),
            field(&s.value.to_string()),
            field(&s.unit),
            s.quality.as_str(),
            field(&s.source),
            s.seq,
            r.wall_time_ns
        );
    }
    out
}

#[derive(Debug, thiserror::Error)]
#[error("trace CSV: {0}")]
pub struct TraceCsvError(pub String);

pub fn parse_csv(text: &str) -> Result<Vec<TraceRow>, TraceCsvError> {
    let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header: Vec<String> =
        rd.headers().map_err(|e| TraceCsvError(e.to_string()))?.iter().map(str::to_string).collect();
    if header.join(",") != TRACE_HEADER {
        return Err(TraceCsvError(format!("unexpected header `{}`", header.join(","))));
    }
    let mut rows = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| TraceCsvError(e.to_string()))?;
        let num = |i: usize| -> Result<u64, TraceCsvError> {
            rec[i].parse().map_err(|_| TraceCsvError(format!("bad integer `{}`", &rec[i])))
        };
        let value = match &rec[2] {
            "true" => Value::Bool(true),
            "false" => Value::Bool(false),
            v => v.parse::<f64>().map(Value::Real).unwrap_or_else(|_| Value::Label(v.to_string())),
        };
        let quality: Quality = rec[4].parse().map_err(|e: crate::model::ModelError| TraceCsvError(e.to_string()))?;
        rows.push(TraceRow {
            sample: SignalSample {
                topic: rec[1].to_string(),
                sim_time: num(0)?,
                value,
                unit: rec[3].to_string(),
                quality,
                source: rec[5].to_string(),
                seq: num(6)?,
            },
            wall_time_ns: num(7)?,
        });
    }
    Ok(rows)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
