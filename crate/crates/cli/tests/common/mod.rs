//! Minimal agent speaking the wire protocol, written against raw JSON so it
//! does not share code with the server side.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};

use serde_json::{json, Value};

pub enum Reply {
    Line(String),
    /// Drop the connection instead of answering.
    Close,
}

#[derive(Debug, Default)]
pub struct AgentLog {
    pub kinds: Vec<String>,
    pub requests: Vec<Value>,
}

pub struct Agent {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

/// Answer to `req` with the given type and fields, echoing version and id.
pub fn answer(req: &Value, kind: &str, fields: Value) -> String {
    let mut obj = json!({"version": req["version"], "id": req["id"], "type": kind});
    if let Value::Object(f) = fields {
        obj.as_object_mut().unwrap().extend(f);
    }
    obj.to_string()
}

/// What a well-behaved agent says: zero actions, batch-size diagnostics.
pub fn default_answer(req: &Value) -> String {
    match req["type"].as_str().unwrap() {
        "ping" => answer(req, "pong", json!({})),
        "act" => {
            let n = req["goal"].as_array().unwrap().len();
            answer(req, "action", json!({ "action": vec![0.0; n] }))
        }
        "update" => {
            let n = req["batch"].as_array().unwrap().len();
            answer(req, "diagnostics", json!({"values": {"batch": n}}))
        }
        "reset_notice" | "save" => answer(req, "ack", json!({})),
        other => panic!("unknown request {other}"),
    }
}

/// Steps straight toward the goal, saturating at `delta_q_max` per action.
pub fn goal_seeking(req: &Value, delta_q_max: f64) -> Vec<f64> {
    let goal: Vec<f64> = serde_json::from_value(req["goal"].clone()).unwrap();
    let obs: Vec<f64> = serde_json::from_value(req["obs"].clone()).unwrap();
    goal.iter()
        .zip(&obs)
        .map(|(g, q)| ((g - q) / delta_q_max).clamp(-1.0, 1.0))
        .collect()
}

impl Agent {
    pub fn connect(addr: SocketAddr) -> Self {
        let stream = TcpStream::connect(addr).unwrap();
        Self {
            reader: BufReader::new(stream.try_clone().unwrap()),
            writer: stream,
        }
    }

    /// Answers requests until the server hangs up. `hook` sees each request
    /// and its index and may override the default answer.
    pub fn serve(mut self, mut hook: impl FnMut(&Value, usize) -> Option<Reply>) -> AgentLog {
        let mut log = AgentLog::default();
        let mut line = String::new();
        loop {
            line.clear();
            match self.reader.read_line(&mut line) {
                Ok(0) | Err(_) => break,
                Ok(_) => {}
            }
            let req: Value = serde_json::from_str(&line).unwrap();
            assert_eq!(req["version"], 1);
            log.kinds.push(req["type"].as_str().unwrap().to_string());
            let reply = hook(&req, log.requests.len());
            log.requests.push(req.clone());
            let text = match reply {
                Some(Reply::Close) => break,
                Some(Reply::Line(l)) => l,
                None => default_answer(&req),
            };
            if self.writer.write_all(format!("{text}\n").as_bytes()).is_err() {
                break;
            }
        }
        log
    }
}
