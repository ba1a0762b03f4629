//! Newline-delimited JSON envelopes and the per-connection handler shared by
//! the TCP listener and the WebSocket endpoint.
//!
//! ```text
//! {"v":1,"type":"join","session":"","seq":1,"sim_time_ns":0,"payload":{"token":"..."}}
//! ```

use std::sync::Arc;

use crossbeam_channel::{Receiver, Sender};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::command::Command;
use crate::model::{Nanos, SignalSample};

use super::remote::StepPayload;
use super::{Hub, HubError, Principal};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeType {
    Join,
    JoinAck,
    Publish,
    Grant,
    RequestStep,
    Command,
    CommandResult,
    Stream,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Envelope {
    pub v: u32,
    #[serde(rename = "type")]
    pub kind: EnvelopeType,
    #[serde(default)]
    pub session: String,
    pub seq: u64,
    #[serde(default)]
    pub sim_time_ns: Nanos,
    #[serde(default)]
    pub payload: Json,
}

impl Envelope {
    pub fn new(kind: EnvelopeType, session: &str, seq: u64, sim_time_ns: Nanos, payload: Json) -> Self {
        Envelope { v: PROTOCOL_VERSION, kind, session: session.to_string(), seq, sim_time_ns, payload }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("envelope serializes")
    }

    pub fn parse(line: &str) -> Result<Envelope, String> {
        let env: Envelope = serde_json::from_str(line).map_err(|e| format!("malformed envelope: {e}"))?;
        if env.v != PROTOCOL_VERSION {
            return Err(format!("unsupported protocol version {}", env.v));
        }
        Ok(env)
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct JoinPayload {
    #[serde(default)]
    token: Option<String>,
    #[serde(default)]
    run: Option<String>,
    #[serde(default)]
    participant: Option<String>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct StreamRequest {
    #[serde(default)]
    run: Option<String>,
}

/// Protocol state of one client connection.
pub struct ProtocolHandler {
    hub: Arc<Hub>,
    session: Option<String>,
    remote: Option<(String, String)>,
    last_in: Option<u64>,
    out_seq: u64,
    outbox_tx: Sender<Envelope>,
    outbox_rx: Receiver<Envelope>,
}

impl ProtocolHandler {
    pub fn new(hub: Arc<Hub>) -> Self {
        let (outbox_tx, outbox_rx) = crossbeam_channel::unbounded();
        ProtocolHandler { hub, session: None, remote: None, last_in: None, out_seq: 0, outbox_tx, outbox_rx }
    }

    /// Envelopes pushed to the client asynchronously (grants, stream).
    pub fn outbox(&self) -> Receiver<Envelope> {
        self.outbox_rx.clone()
    }

    pub fn session(&self) -> Option<&str> {
        self.session.as_deref()
    }

    fn reply(&mut self, kind: EnvelopeType, sim_time: Nanos, payload: Json) -> Envelope {
        self.out_seq += 1;
        Envelope::new(kind, self.session.as_deref().unwrap_or(""), self.out_seq, sim_time, payload)
    }

    fn error(&mut self, message: impl Into<String>) -> Envelope {
        self.reply(EnvelopeType::Error, 0, json!({ "message": message.into() }))
    }

    fn hub_error(&mut self, e: HubError) -> Envelope {
        self.reply(EnvelopeType::CommandResult, 0, json!({ "ok": false, "error": e.to_string(), "detail": e }))
    }

    /// Handles one inbound line and returns the direct replies.
    pub fn handle_line(&mut self, line: &str) -> Vec<Envelope> {
        let line = line.trim();
        if line.is_empty() {
            return Vec::new();
        }
        let env = match Envelope::parse(line) {
            Ok(e) => e,
            Err(msg) => return vec![self.error(msg)],
        };
        if let Some(last) = self.last_in {
            if env.seq <= last {
                return vec![self.error(format!("StaleSeq: envelope seq {} is not after {last}", env.seq))];
            }
        }
        self.last_in = Some(env.seq);
        if env.kind != EnvelopeType::Join && self.session.is_none() {
            return vec![self.error("join first")];
        }
        match env.kind {
            EnvelopeType::Join => vec![self.join(env)],
            EnvelopeType::Publish => vec![self.publish(env)],
            EnvelopeType::Command => vec![self.command(env)],
            EnvelopeType::RequestStep => self.request_step(env).into_iter().collect(),
            EnvelopeType::Stream => vec![self.stream(env)],
            other => {
                vec![self.error(format!("`{}` is not accepted from clients", json!(other).as_str().unwrap_or("?")))]
            }
        }
    }

    fn join(&mut self, env: Envelope) -> Envelope {
        if self.session.is_some() {
            return self.error("already joined");
        }
        let p: JoinPayload = match serde_json::from_value(env.payload) {
            Ok(p) => p,
            Err(e) => return self.error(format!("bad join payload: {e}")),
        };
        let joined = match (&p.token, &p.run, &p.participant) {
            (Some(token), None, None) => self.hub.login(token).map(|s| (s, None)),
            (_, Some(run), Some(participant)) => self.attach(p.token.as_deref(), run, participant),
            _ => Err(HubError::InvalidArgument("join needs a token or run and participant".into())),
        };
        match joined {
            Ok((s, remote)) => {
                self.session = Some(s.id.clone());
                self.remote = remote;
                let payload =
                    json!({ "session": s.id, "principal": s.principal, "site": s.site, "granted": s.granted });
                self.reply(EnvelopeType::JoinAck, 0, payload)
            }
            Err(e) => self.hub_error(e),
        }
    }

    fn attach(
        &mut self,
        token: Option<&str>,
        run: &str,
        participant: &str,
    ) -> Result<(super::Session, Option<(String, String)>), HubError> {
        let handle = self.hub.run(run).ok_or_else(|| HubError::UnknownRun(run.to_string()))?;
        let desc =
            handle.exp.participant(participant).ok_or_else(|| HubError::UnknownParticipant(participant.to_string()))?;
        let site = self.hub.registry().site(&desc.site).ok_or_else(|| HubError::UnknownSite(desc.site.clone()))?;
        let mut session = super::Session {
            id: format!("{run}/{participant}"),
            principal: Principal::Participant(participant.to_string()),
            site: site.id.clone(),
            granted: site.allow_list.clone(),
            run: Some(run.to_string()),
            offers: desc.offers.iter().cloned().collect(),
            last_seq: Default::default(),
        };
        if let Some(t) = token {
            session.granted = self.hub.login(t)?.granted;
        }
        self.hub.remote.attach(run, participant, &session.id, self.outbox_tx.clone())?;
        self.hub.sessions.lock().insert(session.id.clone(), session.clone());
        Ok((session, Some((run.to_string(), participant.to_string()))))
    }

    fn publish(&mut self, env: Envelope) -> Envelope {
        let sample: SignalSample = match serde_json::from_value(env.payload) {
            Ok(s) => s,
            Err(e) => return self.error(format!("bad sample: {e}")),
        };
        let session = self.session.clone().expect("joined");
        let t = sample.sim_time;
        match self.hub.publish(&session, sample, t, false) {
            Ok(()) => self.reply(EnvelopeType::CommandResult, t, json!({ "ok": true })),
            Err(e) => self.hub_error(e),
        }
    }

    fn command(&mut self, env: Envelope) -> Envelope {
        let cmd: Command = match serde_json::from_value(env.payload) {
            Ok(c) => c,
            Err(e) => return self.error(format!("bad command: {e}")),
        };
        let session = self.session.clone().expect("joined");
        match self.hub.execute(&session, cmd) {
            Ok(out) => self.reply(EnvelopeType::CommandResult, 0, json!({ "ok": true, "output": out })),
            Err(e) => self.hub_error(e),
        }
    }

    fn request_step(&mut self, env: Envelope) -> Option<Envelope> {
        let Some((run, participant)) = self.remote.clone() else {
            return Some(self.error("request_step needs a participant session"));
        };
        let step: StepPayload = match serde_json::from_value(env.payload) {
            Ok(s) => s,
            Err(e) => return Some(self.error(format!("bad step: {e}"))),
        };
        match self.hub.remote.reply(&run, &participant, step) {
            Ok(()) => None,
            Err(e) => Some(self.hub_error(e)),
        }
    }

    fn stream(&mut self, env: Envelope) -> Envelope {
        let req: StreamRequest = serde_json::from_value(env.payload).unwrap_or_default();
        let rx = self.hub.subscribe();
        let tx = self.outbox_tx.clone();
        let session = self.session.clone().unwrap_or_default();
        std::thread::spawn(move || {
            let mut seq = 0;
            for ev in rx {
                if req.run.as_ref().is_some_and(|r| *r != ev.run) {
                    continue;
                }
                seq += 1;
                let t = ev.sample.sim_time;
                let payload = serde_json::to_value(&ev).expect("serializable");
                if tx.send(Envelope::new(EnvelopeType::Stream, &session, seq, t, payload)).is_err() {
                    break;
                }
            }
        });
        self.reply(EnvelopeType::CommandResult, 0, json!({ "ok": true, "streaming": true }))
    }

    /// Releases the connection's session.
    pub fn close(&mut self) {
        if let Some((run, p)) = self.remote.take() {
            self.hub.remote.detach(&run, &p);
        }
        if let Some(s) = self.session.take() {
            self.hub.sessions.lock().remove(&s);
        }
    }
}

impl Drop for ProtocolHandler {
    fn drop(&mut self) {
        self.close();
    }
}
