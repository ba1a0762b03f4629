//! Participants that run outside the hub process and are stepped over the
//! wire protocol.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::experiment::ParticipantDescriptor;
use crate::model::Nanos;
use crate::plant::{Participant, PlantError, Snapshot, Track};

use super::protocol::{Envelope, EnvelopeType};
use super::HubError;

/// Sent to the remote side: integrate `[from_ns, to_ns]` with these inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrantPayload {
    pub from_ns: Nanos,
    pub to_ns: Nanos,
    pub inputs: BTreeMap<String, f64>,
}

/// The remote side's answer: outputs at `to_ns`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPayload {
    pub to_ns: Nanos,
    pub outputs: BTreeMap<String, f64>,
}

struct Slot {
    outbox: Option<(String, Sender<Envelope>)>,
    replies: Sender<StepPayload>,
}

#[derive(Default)]
pub struct RemoteSlots {
    slots: Mutex<HashMap<(String, String), Slot>>,
}

impl RemoteSlots {
    fn open(&self, run: &str, participant: &str) -> Receiver<StepPayload> {
        let (tx, rx) = crossbeam_channel::unbounded();
        self.slots.lock().insert((run.to_string(), participant.to_string()), Slot { outbox: None, replies: tx });
        rx
    }

    /// Connects a client session to a waiting remote participant.
    pub fn attach(
        &self,
        run: &str,
        participant: &str,
        session: &str,
        outbox: Sender<Envelope>,
    ) -> Result<(), HubError> {
        let mut slots = self.slots.lock();
        let slot = slots
            .get_mut(&(run.to_string(), participant.to_string()))
            .ok_or_else(|| HubError::UnknownParticipant(participant.to_string()))?;
        if slot.outbox.is_some() {
            return Err(HubError::DuplicateParticipant(participant.to_string()));
        }
        slot.outbox = Some((session.to_string(), outbox));
        Ok(())
    }

    pub fn detach(&self, run: &str, participant: &str) {
        if let Some(slot) = self.slots.lock().get_mut(&(run.to_string(), participant.to_string())) {
            slot.outbox = None;
        }
    }

    pub fn reply(&self, run: &str, participant: &str, step: StepPayload) -> Result<(), HubError> {
        let slots = self.slots.lock();
        let slot = slots
            .get(&(run.to_string(), participant.to_string()))
            .ok_or_else(|| HubError::UnknownParticipant(participant.to_string()))?;
        slot.replies.send(step).map_err(|_| HubError::NoActiveRun)
    }

    fn outbox(&self, run: &str, participant: &str) -> Option<(String, Sender<Envelope>)> {
        self.slots.lock().get(&(run.to_string(), participant.to_string())).and_then(|s| s.outbox.clone())
    }

    fn close(&self, run: &str, participant: &str) {
        self.slots.lock().remove(&(run.to_string(), participant.to_string()));
    }
}

/// Hub-side proxy of a remote participant. Every step is a grant envelope
/// to the client followed by a blocking wait for its `request_step` reply.
pub struct RemoteParticipant {
    hub: Arc<super::Hub>,
    run: String,
    desc: ParticipantDescriptor,
    replies: Receiver<StepPayload>,
    watchdog: Duration,
    seq: u64,
}

impl RemoteParticipant {
    pub fn new(hub: Arc<super::Hub>, run: &str, desc: &ParticipantDescriptor, watchdog: Duration) -> Self {
        let replies = hub.remote.open(run, &desc.id);
        RemoteParticipant { hub, run: run.to_string(), desc: desc.clone(), replies, watchdog, seq: 0 }
    }

    fn exchange(&mut self, from: Nanos, to: Nanos, inputs: BTreeMap<String, f64>) -> Result<Vec<f64>, PlantError> {
        let deadline = Instant::now() + self.watchdog;
        let (session, outbox) = loop {
            if let Some(o) = self.hub.remote.outbox(&self.run, &self.desc.id) {
                break o;
            }
            if Instant::now() >= deadline {
                return Err(PlantError::Timeout(format!("remote participant `{}` did not join", self.desc.id)));
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        self.seq += 1;
        let payload = serde_json::to_value(GrantPayload { from_ns: from, to_ns: to, inputs }).expect("serializable");
        let env = Envelope::new(EnvelopeType::Grant, &session, self.seq, to, payload);
        outbox
            .send(env)
            .map_err(|_| PlantError::Fault(format!("remote participant `{}` disconnected", self.desc.id)))?;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match self.replies.recv_timeout(left) {
                Ok(step) if step.to_ns == to => {
                    return self
                        .desc
                        .offers
                        .iter()
                        .map(|t| {
                            step.outputs.get(t).copied().ok_or_else(|| {
                                PlantError::Fault(format!("remote participant `{}` omitted `{t}`", self.desc.id))
                            })
                        })
                        .collect();
                }
                Ok(_) => continue,
                Err(RecvTimeoutError::Timeout) => {
                    return Err(PlantError::Timeout(format!("`{}` did not answer grant to {to}", self.desc.id)))
                }
                Err(RecvTimeoutError::Disconnected) => {
                    return Err(PlantError::Fault(format!("remote participant `{}` disconnected", self.desc.id)))
                }
            }
        }
    }

    fn input_map(&self, values: impl Iterator<Item = f64>) -> BTreeMap<String, f64> {
        self.desc.requires.iter().cloned().zip(values).collect()
    }
}

impl Drop for RemoteParticipant {
    fn drop(&mut self) {
        self.hub.remote.close(&self.run, &self.desc.id);
    }
}

impl Participant for RemoteParticipant {
    fn id(&self) -> &str {
        &self.desc.id
    }

    fn step_ns(&self) -> Nanos {
        self.desc.step_ns
    }

    fn input_topics(&self) -> Vec<String> {
        self.desc.requires.clone()
    }

    fn output_topics(&self) -> Vec<String> {
        self.desc.offers.clone()
    }

    fn initialize(&mut self, inputs: &[f64]) -> Result<Vec<f64>, PlantError> {
        let m = self.input_map(inputs.iter().copied());
        self.exchange(0, 0, m)
    }

    fn advance(&mut self, from: Nanos, to: Nanos, inputs: &[Track]) -> Result<Vec<f64>, PlantError> {
        let m = self.input_map(inputs.iter().map(|t| t.at(from)));
        self.exchange(from, to, m)
    }

    fn save(&self) -> Result<Snapshot, PlantError> {
        Err(PlantError::UnsupportedTopology(format!("remote participant `{}` cannot roll back", self.desc.id)))
    }

    fn restore(&mut self, _snapshot: &Snapshot) -> Result<(), PlantError> {
        Err(PlantError::UnsupportedTopology(format!("remote participant `{}` cannot roll back", self.desc.id)))
    }
}
