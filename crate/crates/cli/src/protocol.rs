//! Agent wire protocol.
//!
//! Newline-delimited JSON over a byte stream. The runner sends one request,
//! then blocks until the agent answers it; there is never more than one
//! request outstanding. Every message is an object carrying `version`, `id`
//! and `type`:
//!
//! ```text
//! -> {"version":1,"id":3,"type":"act","obs":[...],"goal":[...]}
//! <- {"version":1,"id":3,"type":"action","action":[...]}
//! ```
//!
//! | request        | fields               | response      | fields        |
//! |----------------|----------------------|---------------|---------------|
//! | `act`          | `obs`, `goal`        | `action`      | `action`      |
//! | `update`       | `batch`              | `diagnostics` | `values`      |
//! | `reset_notice` | `seed`               | `ack`         |               |
//! | `save`         | `path`               | `ack`         |               |
//! | `ping`         |                      | `pong`        |               |
//!
//! `obs` is the state part of the observation (joint positions, joint
//! velocities, end-effector position, three human keypoints relative to the end
//! effector) and `goal` the episode goal. Any request may instead be answered
//! with `{"type":"error","message":...}`, which the runner reports as an agent
//! failure. Anything else that does not match is a protocol violation: the
//! request fails, the session stays open and the environment is not stepped.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use safearm_rl::policy::{PolicyError, UpdateDiagnostics};
use safearm_rl::{Observation, Policy, Transition};
use serde_json::{Map, Value};
use thiserror::Error;

pub const PROTOCOL_VERSION: u64 = 1;

/// Default limit on the length of one message line in bytes.
pub const MAX_LINE: u64 = 64 << 20;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("protocol violation: {0}")]
    Violation(String),
    #[error("agent did not answer within {0:?}")]
    Timeout(Duration),
    #[error("agent disconnected")]
    Disconnected,
    #[error("agent reported an error: {0}")]
    Agent(String),
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
}

fn violation(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::Violation(msg.into())
}

/// One transition of an update batch; `goal` applies to both states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WireTransition {
    pub obs: Vec<f64>,
    pub goal: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_obs: Vec<f64>,
    pub done: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Request {
    Act { obs: Vec<f64>, goal: Vec<f64> },
    Update { batch: Vec<WireTransition> },
    ResetNotice { seed: u64 },
    Save { path: String },
    Ping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Response {
    Action { action: Vec<f64> },
    Diagnostics { values: BTreeMap<String, f64> },
    Ack,
    Pong,
    Error { message: String },
}

impl Request {
    pub fn kind(&self) -> &'static str {
        match self {
            Request::Act { .. } => "act",
            Request::Update { .. } => "update",
            Request::ResetNotice { .. } => "reset_notice",
            Request::Save { .. } => "save",
            Request::Ping => "ping",
        }
    }

    fn accepts(&self, resp: &Response) -> bool {
        matches!(
            (self, resp),
            (Request::Act { .. }, Response::Action { .. })
                | (Request::Update { .. }, Response::Diagnostics { .. })
                | (Request::ResetNotice { .. }, Response::Ack)
                | (Request::Save { .. }, Response::Ack)
                | (Request::Ping, Response::Pong)
        )
    }
}

/// A message with its envelope fields.
#[derive(Clone, Debug, PartialEq)]
pub struct Message<T> {
    pub version: u64,
    pub id: u64,
    pub body: T,
}

impl<T: Serialize> Message<T> {
    pub fn new(id: u64, body: T) -> Self {
        Self {
            version: PROTOCOL_VERSION,
            id,
            body,
        }
    }

    /// The exact line put on the wire, without the trailing newline.
    pub fn encode(&self) -> String {
        let body = serde_json::to_value(&self.body).expect("messages serialize");
        let Value::Object(fields) = body else {
            unreachable!("tagged enums serialize to objects")
        };
        let mut obj = Map::new();
        obj.insert("version".into(), self.version.into());
        obj.insert("id".into(), self.id.into());
        // `type` first, then the payload fields in declaration order
        obj.insert("type".into(), fields["type"].clone());
        for (k, v) in fields {
            if k != "type" {
                obj.insert(k, v);
            }
        }
        Value::Object(obj).to_string()
    }
}

impl<T: DeserializeOwned> Message<T> {
    /// Parses one line. Does not check the version number.
    pub fn decode(line: &str) -> Result<Self, ProtocolError> {
        let value: Value =
            serde_json::from_str(line).map_err(|e| violation(format!("malformed JSON: {e}")))?;
        let Value::Object(mut obj) = value else {
            return Err(violation("message is not an object"));
        };
        let mut take_u64 = |key: &str| {
            obj.remove(key)
                .and_then(|v| v.as_u64())
                .ok_or_else(|| violation(format!("missing or non-integer `{key}`")))
        };
        let version = take_u64("version")?;
        let id = take_u64("id")?;
        let body = serde_json::from_value(Value::Object(obj))
            .map_err(|e| violation(format!("bad payload: {e}")))?;
        Ok(Self { version, id, body })
    }
}

/// Runner side of a session over any line transport.
pub struct Session<R, W> {
    reader: R,
    writer: W,
    next_id: u64,
    timeout: Option<Duration>,
    max_line: u64,
}

impl<R: BufRead, W: Write> Session<R, W> {
    pub fn new(reader: R, writer: W) -> Self {
        Self {
            reader,
            writer,
            next_id: 1,
            timeout: None,
            max_line: MAX_LINE,
        }
    }

    pub fn with_max_line(mut self, bytes: u64) -> Self {
        self.max_line = bytes;
        self
    }

    pub fn into_inner(self) -> (R, W) {
        (self.reader, self.writer)
    }

    /// Only used for error reporting; the transport enforces the deadline.
    pub fn with_timeout(mut self, timeout: Option<Duration>) -> Self {
        self.timeout = timeout;
        self
    }

    /// Sends `req` and waits for its answer.
    pub fn request(&mut self, req: Request) -> Result<Response, ProtocolError> {
        let id = self.next_id;
        self.next_id += 1;
        let line = Message::new(id, &req).encode();
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;

        let line = self.read_line()?;
        let msg = Message::<Response>::decode(line.trim_end_matches(['\n', '\r']))?;
        if msg.version != PROTOCOL_VERSION {
            return Err(violation(format!(
                "version {} does not match {PROTOCOL_VERSION}",
                msg.version
            )));
        }
        if msg.id != id {
            return Err(violation(format!("answer to {} while waiting for {id}", msg.id)));
        }
        if let Response::Error { message } = msg.body {
            return Err(ProtocolError::Agent(message));
        }
        if !req.accepts(&msg.body) {
            return Err(violation(format!("unexpected answer to `{}`", req.kind())));
        }
        Ok(msg.body)
    }

    fn read_line(&mut self) -> Result<String, ProtocolError> {
        let mut buf = Vec::new();
        let n = (&mut self.reader)
            .take(self.max_line + 1)
            .read_until(b'\n', &mut buf)
            .map_err(|e| match e.kind() {
                ErrorKind::WouldBlock | ErrorKind::TimedOut => {
                    ProtocolError::Timeout(self.timeout.unwrap_or_default())
                }
                _ => ProtocolError::Io(e),
            })?;
        if n == 0 {
            return Err(ProtocolError::Disconnected);
        }
        if n as u64 > self.max_line {
            // drop the rest of the oversized line so the next answer lines up
            let mut rest = Vec::new();
            let _ = self.reader.read_until(b'\n', &mut rest);
            return Err(violation("message too long"));
        }
        String::from_utf8(buf).map_err(|_| violation("message is not UTF-8"))
    }

    pub fn ping(&mut self) -> Result<(), ProtocolError> {
        self.request(Request::Ping).map(|_| ())
    }

    /// Requests an action and checks it has `dof` finite components in `[-1, 1]`.
    pub fn act(&mut self, obs: &[f64], goal: &[f64], dof: usize) -> Result<Vec<f64>, ProtocolError> {
        let Response::Action { action } = self.request(Request::Act {
            obs: obs.to_vec(),
            goal: goal.to_vec(),
        })?
        else {
            unreachable!("checked by request")
        };
        if action.len() != dof {
            return Err(violation(format!(
                "action has {} components, expected {dof}",
                action.len()
            )));
        }
        if action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(violation("action component outside [-1, 1]"));
        }
        Ok(action)
    }

    pub fn update(
        &mut self,
        batch: Vec<WireTransition>,
    ) -> Result<BTreeMap<String, f64>, ProtocolError> {
        match self.request(Request::Update { batch })? {
            Response::Diagnostics { values } => Ok(values),
            _ => unreachable!("checked by request"),
        }
    }
}

pub type TcpSession = Session<BufReader<TcpStream>, TcpStream>;

/// Listens on `endpoint` (`host:port`, optionally prefixed with `tcp://`) and
/// waits up to `accept_timeout` for one agent to connect, then checks it
/// answers a ping.
pub fn serve(
    endpoint: &str,
    accept_timeout: Duration,
    io_timeout: Option<Duration>,
    on_listening: impl FnOnce(std::net::SocketAddr),
) -> Result<TcpSession, ProtocolError> {
    let addr = endpoint.strip_prefix("tcp://").unwrap_or(endpoint);
    let listener = TcpListener::bind(addr)?;
    on_listening(listener.local_addr()?);
    listener.set_nonblocking(true)?;
    let deadline = Instant::now() + accept_timeout;
    let stream = loop {
        match listener.accept() {
            Ok((s, _)) => break s,
            Err(e) if e.kind() == ErrorKind::WouldBlock => {
                if Instant::now() >= deadline {
                    return Err(ProtocolError::Timeout(accept_timeout));
                }
                std::thread::sleep(Duration::from_millis(5));
            }
            Err(e) => return Err(e.into()),
        }
    };
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(io_timeout)?;
    let reader = BufReader::new(stream.try_clone()?);
    let mut session = Session::new(reader, stream).with_timeout(io_timeout);
    session.ping()?;
    Ok(session)
}

/// Policy provider backed by an agent on the other end of a session.
///
/// Protocol violations on `act` are retried a few times before giving up;
/// the environment is only stepped once a valid action has arrived.
pub struct ExternalPolicy<R, W> {
    session: Session<R, W>,
    dof: usize,
    save_path: Option<String>,
    pub max_retries: usize,
    pub violations: usize,
}

impl<R: BufRead, W: Write> ExternalPolicy<R, W> {
    pub fn new(session: Session<R, W>, dof: usize) -> Self {
        Self {
            session,
            dof,
            save_path: None,
            max_retries: 3,
            violations: 0,
        }
    }

    /// Where the agent is asked to save itself at every run checkpoint.
    pub fn with_save_path(mut self, path: impl Into<String>) -> Self {
        self.save_path = Some(path.into());
        self
    }

    pub fn session(&mut self) -> &mut Session<R, W> {
        &mut self.session
    }

    /// Splits a flat `s || g` observation into its wire parts.
    pub fn split(obs: &[f64], dof: usize) -> (Vec<f64>, Vec<f64>) {
        let mut state = Vec::with_capacity(obs.len() - dof);
        state.extend_from_slice(&obs[..2 * dof]);
        state.extend_from_slice(&obs[3 * dof..]);
        (state, obs[2 * dof..3 * dof].to_vec())
    }

    fn provider(e: ProtocolError) -> PolicyError {
        PolicyError::Provider(e.to_string())
    }
}

impl<R: BufRead, W: Write> Policy for ExternalPolicy<R, W> {
    fn name(&self) -> &str {
        "external"
    }

    fn act(&mut self, obs: &[f64]) -> Result<Vec<f64>, PolicyError> {
        if obs.len() != Observation::len_for(self.dof) {
            return Err(PolicyError::Provider(format!(
                "observation has length {}",
                obs.len()
            )));
        }
        let (state, goal) = Self::split(obs, self.dof);
        let mut attempt = 0;
        loop {
            match self.session.act(&state, &goal, self.dof) {
                Ok(a) => return Ok(a),
                Err(ProtocolError::Violation(msg)) if attempt < self.max_retries => {
                    self.violations += 1;
                    attempt += 1;
                    log::warn!("agent violated the protocol ({msg}); asking again");
                }
                Err(e) => return Err(Self::provider(e)),
            }
        }
    }

    fn update(&mut self, batch: &[Transition]) -> Result<UpdateDiagnostics, PolicyError> {
        let dof = self.dof;
        let wire = batch
            .iter()
            .map(|t| {
                let (obs, goal) = Self::split(&t.obs, dof);
                let (next_obs, _) = Self::split(&t.next_obs, dof);
                WireTransition {
                    obs,
                    goal,
                    action: t.action.clone(),
                    reward: t.reward,
                    next_obs,
                    done: t.done,
                }
            })
            .collect();
        let values = self.session.update(wire).map_err(Self::provider)?;
        Ok(UpdateDiagnostics { values })
    }

    fn reset_notice(&mut self, seed: u64) -> Result<(), PolicyError> {
        self.session
            .request(Request::ResetNotice { seed })
            .map(|_| ())
            .map_err(Self::provider)
    }

    fn checkpoint(&mut self) -> Result<serde_json::Value, PolicyError> {
        let Some(path) = self.save_path.clone() else {
            return Ok(Value::Null);
        };
        self.session
            .request(Request::Save { path: path.clone() })
            .map_err(Self::provider)?;
        Ok(Value::String(path))
    }

    fn restore(&mut self, state: &serde_json::Value) -> Result<(), PolicyError> {
        // the agent owns its weights; it has to be started from its own save
        if let Value::String(path) = state {
            log::warn!("resuming with an external agent; it should have loaded {path} itself");
        }
        Ok(())
    }
}
