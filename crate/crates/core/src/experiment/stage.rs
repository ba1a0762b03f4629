use std::collections::BTreeMap;

use thiserror::Error;

use crate::command::Command;
use crate::model::Nanos;

use super::{Guard, Stage};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StageError {
    #[error("UnknownTopic {0}: guard topic has no observation after warm-up")]
    UnknownTopic(String),
    #[error("time went backwards: {now} < {last}")]
    TimeReversal { now: Nanos, last: Nanos },
    #[error("unknown stage `{0}`")]
    UnknownStage(String),
}

/// Runtime state of an experiment's stage machine.
///
/// Advanced by the run coordinator at macro-step boundaries only. The first
/// call enters the initial stage. Each call evaluates the current stage's
/// guards in document order and takes at most one transition.
#[derive(Debug, Clone)]
pub struct StageMachine {
    stages: Vec<Stage>,
    initial: String,
    current: Option<usize>,
    entered_at: Nanos,
    hold_since: Vec<Option<Nanos>>,
    started_at: Option<Nanos>,
    last_now: Option<Nanos>,
    warmup: Nanos,
    history: Vec<(Nanos, String)>,
}

impl StageMachine {
    /// `warmup` is the grace period during which guard topics may still be
    /// missing from the observations.
    pub fn new(stages: &[Stage], initial: &str, warmup: Nanos) -> Result<Self, StageError> {
        if !stages.iter().any(|s| s.id == initial) {
            return Err(StageError::UnknownStage(initial.to_string()));
        }
        Ok(StageMachine {
            stages: stages.to_vec(),
            initial: initial.to_string(),
            current: None,
            entered_at: 0,
            hold_since: Vec::new(),
            started_at: None,
            last_now: None,
            warmup,
            history: Vec::new(),
        })
    }

    pub fn current(&self) -> Option<&str> {
        self.current.map(|i| self.stages[i].id.as_str())
    }

    /// `(entry time, stage id)` of every stage entered so far.
    pub fn history(&self) -> &[(Nanos, String)] {
        &self.history
    }

    fn index(&self, id: &str) -> Result<usize, StageError> {
        self.stages.iter().position(|s| s.id == id).ok_or_else(|| StageError::UnknownStage(id.to_string()))
    }

    fn enter(&mut self, idx: usize, now: Nanos, actions: &mut Vec<Command>) {
        self.current = Some(idx);
        self.entered_at = now;
        self.hold_since = vec![None; self.stages[idx].transitions.len()];
        self.history.push((now, self.stages[idx].id.clone()));
        actions.extend(self.stages[idx].entry_actions.iter().cloned());
    }

    pub fn stage_step(&mut self, observations: &BTreeMap<String, f64>, now: Nanos) -> Result<Vec<Command>, StageError> {
        if let Some(last) = self.last_now {
            if now < last {
                return Err(StageError::TimeReversal { now, last });
            }
        }
        self.last_now = Some(now);
        let mut actions = Vec::new();
        if self.current.is_none() {
            self.started_at = Some(now);
            let idx = self.index(&self.initial.clone())?;
            self.enter(idx, now, &mut actions);
        }
        let idx = self.current.expect("entered above");
        let warm = now >= self.started_at.unwrap_or(0) + self.warmup;

        let mut fired: Option<usize> = None;
        for (i, tr) in self.stages[idx].transitions.iter().enumerate() {
            let ok = match &tr.guard {
                Guard::Elapsed { elapsed_ns } => now - self.entered_at >= *elapsed_ns,
                Guard::Threshold { topic, cmp, threshold, hold_ns } => match observations.get(topic) {
                    None => {
                        if warm {
                            return Err(StageError::UnknownTopic(topic.clone()));
                        }
                        self.hold_since[i] = None;
                        false
                    }
                    Some(v) => {
                        if cmp.holds(*v, *threshold) {
                            let since = *self.hold_since[i].get_or_insert(now);
                            now - since >= *hold_ns
                        } else {
                            self.hold_since[i] = None;
                            false
                        }
                    }
                },
            };
            if ok && fired.is_none() {
                fired = Some(i);
            }
        }
        if let Some(i) = fired {
            let target = self.stages[idx].transitions[i].target.clone();
            let t = self.index(&target)?;
            self.enter(t, now, &mut actions);
        }
        Ok(actions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experiment::{Cmp, Transition};

    const MS: Nanos = 1_000_000;

    fn stage(id: &str, transitions: Vec<Transition>, actions: Vec<Command>) -> Stage {
        Stage { id: id.into(), entry_actions: actions, transitions }
    }

    fn elapsed(ns: Nanos, target: &str) -> Transition {
        Transition { guard: Guard::Elapsed { elapsed_ns: ns }, target: target.into() }
    }

    #[test]
    fn elapsed_guard_is_inclusive() {
        let stages = vec![
            stage("a", vec![elapsed(2_000 * MS, "b")], vec![]),
            stage("b", vec![], vec![Command::set_value("s.x.p", 1.0, "W")]),
        ];
        let mut m = StageMachine::new(&stages, "a", 10 * MS).unwrap();
        let obs = BTreeMap::new();
        assert!(m.stage_step(&obs, 0).unwrap().is_empty());
        assert!(m.stage_step(&obs, 1_990 * MS).unwrap().is_empty());
        let acts = m.stage_step(&obs, 2_000 * MS).unwrap();
        assert_eq!(m.current(), Some("b"));
        assert_eq!(acts.len(), 1);
        assert!(m.stage_step(&obs, 2_010 * MS).unwrap().is_empty());
    }

    #[test]
    fn document_order_breaks_ties() {
        let stages = vec![
            stage("a", vec![elapsed(1_000 * MS, "b"), elapsed(1_000 * MS, "c")], vec![]),
            stage("b", vec![], vec![]),
            stage("c", vec![], vec![]),
        ];
        let mut m = StageMachine::new(&stages, "a", 0).unwrap();
        m.stage_step(&BTreeMap::new(), 0).unwrap();
        m.stage_step(&BTreeMap::new(), 1_000 * MS).unwrap();
        assert_eq!(m.current(), Some("b"));
    }

    #[test]
    fn hold_guard_fires_after_hold_duration() {
        let tr = Transition {
            guard: Guard::Threshold { topic: "s.v".into(), cmp: Cmp::Lt, threshold: 360.0, hold_ns: 50 * MS },
            target: "low".into(),
        };
        let stages = vec![stage("run", vec![tr], vec![]), stage("low", vec![], vec![])];
        let mut m = StageMachine::new(&stages, "run", 10 * MS).unwrap();
        let mut fired_at = None;
        for k in 0..=30u64 {
            let now = k * 10 * MS;
            let v = if now >= 100 * MS { 350.0 } else { 400.0 };
            let obs = BTreeMap::from([("s.v".to_string(), v)]);
            m.stage_step(&obs, now).unwrap();
            if m.current() == Some("low") && fired_at.is_none() {
                fired_at = Some(now);
            }
        }
        assert_eq!(fired_at, Some(150 * MS));
    }

    #[test]
    fn hold_resets_when_comparison_fails() {
        let tr = Transition {
            guard: Guard::Threshold { topic: "s.v".into(), cmp: Cmp::Ge, threshold: 1.0, hold_ns: 20 * MS },
            target: "b".into(),
        };
        let stages = vec![stage("a", vec![tr], vec![]), stage("b", vec![], vec![])];
        let mut m = StageMachine::new(&stages, "a", 0).unwrap();
        let vals = [1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
        let mut fired = None;
        for (k, v) in vals.iter().enumerate() {
            let now = k as Nanos * 10 * MS;
            m.stage_step(&BTreeMap::from([("s.v".to_string(), *v)]), now).unwrap();
            if m.current() == Some("b") && fired.is_none() {
                fired = Some(now);
            }
        }
        assert_eq!(fired, Some(50 * MS));
    }

    #[test]
    fn missing_topic_after_warmup_is_error() {
        let tr = Transition {
            guard: Guard::Threshold { topic: "s.v".into(), cmp: Cmp::Lt, threshold: 1.0, hold_ns: 0 },
            target: "b".into(),
        };
        let stages = vec![stage("a", vec![tr], vec![]), stage("b", vec![], vec![])];
        let mut m = StageMachine::new(&stages, "a", 10 * MS).unwrap();
        assert!(m.stage_step(&BTreeMap::new(), 0).is_ok());
        assert_eq!(m.stage_step(&BTreeMap::new(), 10 * MS).unwrap_err(), StageError::UnknownTopic("s.v".into()));
    }

    #[test]
    fn time_must_not_go_backwards() {
        let stages = vec![stage("a", vec![], vec![])];
        let mut m = StageMachine::new(&stages, "a", 0).unwrap();
        m.stage_step(&BTreeMap::new(), 10).unwrap();
        assert!(matches!(m.stage_step(&BTreeMap::new(), 5), Err(StageError::TimeReversal { .. })));
    }

    #[test]
    fn initial_entry_actions_emitted_once() {
        let stages = vec![stage("a", vec![], vec![Command::set_value("s.x.p", 2.0, "W")])];
        let mut m = StageMachine::new(&stages, "a", 0).unwrap();
        assert_eq!(m.stage_step(&BTreeMap::new(), 0).unwrap().len(), 1);
        assert!(m.stage_step(&BTreeMap::new(), 10).unwrap().is_empty());
    }
}
