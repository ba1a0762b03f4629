//! Append-only trace store, deduplicated on `(run, source, topic, seq)`.

use std::collections::{BTreeMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use glob::Pattern;
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::model::{Nanos, SignalSample};
use crate::trace::{sha256_hex, sort_rows, write_csv, TraceRow, TRACE_HEADER};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceFilter {
    pub run: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub topic: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub from_ns: Option<Nanos>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub to_ns: Option<Nanos>,
}

impl TraceFilter {
    pub fn run(run: &str) -> Self {
        TraceFilter { run: run.to_string(), ..Default::default() }
    }

    /// The topic glob (`siteA.*`), if any.
    pub fn topic_pattern(&self) -> Result<Option<Pattern>, glob::PatternError> {
        self.topic.as_deref().map(Pattern::new).transpose()
    }

    /// `from_ns` is inclusive, `to_ns` exclusive.
    fn admits(&self, topic: Option<&Pattern>, s: &SignalSample) -> bool {
        topic.is_none_or(|p| p.matches(&s.topic))
            && self.source.as_ref().is_none_or(|t| *t == s.source)
            && self.from_ns.is_none_or(|t| s.sim_time >= t)
            && self.to_ns.is_none_or(|t| s.sim_time < t)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub run: String,
    pub sample: SignalSample,
    pub wall_time_ns: Nanos,
}

type Key = (String, String, String, u64);

#[derive(Default)]
struct Inner {
    runs: BTreeMap<String, Vec<TraceRow>>,
    keys: HashSet<Key>,
    files: BTreeMap<String, BufWriter<File>>,
    sealed: bool,
}

pub struct TraceStore {
    inner: RwLock<Inner>,
    persist_dir: Option<PathBuf>,
}

impl Default for TraceStore {
    fn default() -> Self {
        Self::new()
    }
}

impl TraceStore {
    pub fn new() -> Self {
        TraceStore { inner: RwLock::new(Inner::default()), persist_dir: None }
    }

    /// Also appends every row to `<dir>/<run>.csv` as it is stored.
    pub fn with_persistence(dir: PathBuf) -> Self {
        TraceStore { inner: RwLock::new(Inner::default()), persist_dir: Some(dir) }
    }

    fn key(run: &str, s: &SignalSample) -> Key {
        (run.to_string(), s.source.clone(), s.topic.clone(), s.seq)
    }

    fn insert(&self, inner: &mut Inner, run: &str, sample: SignalSample, wall: Nanos) -> std::io::Result<bool> {
        if inner.sealed {
            return Err(std::io::Error::other("trace store is sealed"));
        }
        if !inner.keys.insert(Self::key(run, &sample)) {
            return Ok(false);
        }
        let row = TraceRow { sample, wall_time_ns: wall };
        if let Some(dir) = &self.persist_dir {
            if !inner.files.contains_key(run) {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("{run}.csv"));
                let fresh = !path.exists();
                let mut f = BufWriter::new(OpenOptions::new().create(true).append(true).open(path)?);
                if fresh {
                    writeln!(f, "{TRACE_HEADER}")?;
                }
                inner.files.insert(run.to_string(), f);
            }
            let text = write_csv([&row]);
            let line = text.split_once('\n').map_or("", |(_, l)| l);
            inner.files.get_mut(run).expect("opened").write_all(line.as_bytes())?;
        }
        inner.runs.entry(run.to_string()).or_default().push(row);
        Ok(true)
    }

    /// Returns `false` if an identical key was stored before.
    pub fn append(&self, run: &str, sample: SignalSample, wall_time_ns: Nanos) -> std::io::Result<bool> {
        let mut inner = self.inner.write();
        self.insert(&mut inner, run, sample, wall_time_ns)
    }

    /// Appends under one lock; returns the number of new rows.
    pub fn append_batch(
        &self,
        run: &str,
        rows: impl IntoIterator<Item = (SignalSample, Nanos)>,
    ) -> std::io::Result<usize> {
        let mut inner = self.inner.write();
        let mut n = 0;
        for (s, w) in rows {
            if self.insert(&mut inner, run, s, w)? {
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn has_run(&self, run: &str) -> bool {
        self.inner.read().runs.contains_key(run)
    }

    pub fn len(&self) -> usize {
        self.inner.read().keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn run_len(&self, run: &str) -> usize {
        self.inner.read().runs.get(run).map_or(0, Vec::len)
    }

    /// Matching rows in `(sim_time, source, seq, topic)` order. An invalid
    /// topic glob matches nothing.
    pub fn query(&self, filter: &TraceFilter) -> Vec<TraceRecord> {
        let Ok(pattern) = filter.topic_pattern() else {
            return Vec::new();
        };
        let inner = self.inner.read();
        let mut rows: Vec<TraceRow> = inner
            .runs
            .get(&filter.run)
            .map(|rows| rows.iter().filter(|r| filter.admits(pattern.as_ref(), &r.sample)).cloned().collect())
            .unwrap_or_default();
        sort_rows(&mut rows);
        rows.into_iter()
            .map(|r| TraceRecord { run: filter.run.clone(), sample: r.sample, wall_time_ns: r.wall_time_ns })
            .collect()
    }

    /// Trace CSV of one run in canonical order.
    pub fn run_csv(&self, run: &str) -> String {
        let mut rows = self.inner.read().runs.get(run).cloned().unwrap_or_default();
        sort_rows(&mut rows);
        write_csv(&rows)
    }

    /// SHA-256 over the CSV export of every run, in run-id order.
    pub fn hash(&self) -> String {
        let runs: Vec<String> = self.inner.read().runs.keys().cloned().collect();
        let mut all = String::new();
        for run in runs {
            all.push_str(&run);
            all.push('\n');
            all.push_str(&self.run_csv(&run));
        }
        sha256_hex(all.as_bytes())
    }

    pub fn flush(&self) -> std::io::Result<()> {
        for f in self.inner.write().files.values_mut() {
            f.flush()?;
        }
        Ok(())
    }
}

impl TraceStore {
    /// Flushes and refuses every later append, so that the rows on disk are
    /// exactly the rows ever acknowledged.
    pub fn seal(&self) -> std::io::Result<()> {
        let mut inner = self.inner.write();
        inner.sealed = true;
        for f in inner.files.values_mut() {
            f.flush()?;
        }
        Ok(())
    }
}

impl Drop for TraceStore {
    fn drop(&mut self) {
        let _ = self.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_are_ignored() {
        let st = TraceStore::new();
        let s = SignalSample::real("s.a", 0, 1.0, "V", "p", 0);
        assert!(st.append("r", s.clone(), 0).unwrap());
        assert!(!st.append("r", s.clone(), 5).unwrap());
        assert!(st.append("r2", s, 0).unwrap());
        assert_eq!(st.len(), 2);
    }

    #[test]
    fn sealed_store_persists_everything_and_refuses_more() {
        let dir = tempfile::tempdir().unwrap();
        let st = TraceStore::with_persistence(dir.path().to_path_buf());
        for i in 0..5 {
            st.append("r", SignalSample::real("s.a", i, 1.0, "V", "p", i), i).unwrap();
        }
        st.seal().unwrap();
        assert!(st.append("r", SignalSample::real("s.a", 9, 1.0, "V", "p", 9), 9).is_err());
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert_eq!(st.len(), 5);
    }

    #[test]
    fn query_is_ordered_and_filtered() {
        let st = TraceStore::new();
        st.append("r", SignalSample::real("s.a", 20, 1.0, "V", "p", 2), 0).unwrap();
        st.append("r", SignalSample::real("s.a", 10, 1.0, "V", "p", 1), 0).unwrap();
        st.append("r", SignalSample::real("s.b", 10, 1.0, "V", "a", 1), 0).unwrap();
        let all = st.query(&TraceFilter::run("r"));
        let order: Vec<(u64, &str)> = all.iter().map(|r| (r.sample.sim_time, r.sample.source.as_str())).collect();
        assert_eq!(order, vec![(10, "a"), (10, "p"), (20, "p")]);
        let f = TraceFilter { topic: Some("s.a".into()), from_ns: Some(15), ..TraceFilter::run("r") };
        assert_eq!(st.query(&f).len(), 1);
    }

    #[test]
    fn persisted_file_matches_export() {
        let dir = tempfile::tempdir().unwrap();
        let st = TraceStore::with_persistence(dir.path().to_path_buf());
        st.append("r", SignalSample::real("s.a", 0, 1.5, "V", "p", 0), 0).unwrap();
        st.flush().unwrap();
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(text, st.run_csv("r"));
    }
}
