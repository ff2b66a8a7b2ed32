//! Experiment runner and agent protocol server.

pub mod protocol;
pub mod runner;

pub use protocol::{ExternalPolicy, ProtocolError, Request, Response, Session};
pub use runner::{run, run_with, AgentKind, Mode, RunSpec, RunSummary};
