//! JSON messages on the agent control channel, framed as `{type, payload}`.

use remcap_core::{AppliedCommand, ControlCommand, EventKind, Resolution, SessionSummary};
use serde::{Deserialize, Serialize};
use uuid::Uuid;

/// Agent capabilities announced on connect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub scene_id: String,
    pub device_id: u16,
    pub fps: u8,
    pub resolution: Resolution,
    pub deterministic_clock: bool,
    pub wheelbase: f64,
    pub max_speed: f64,
    #[serde(default)]
    pub capabilities: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum FromAgent {
    Hello(Hello),
    Started {
        req_id: u64,
    },
    Ack {
        req_id: u64,
        applied: AppliedCommand,
    },
    /// An event the agent logs itself (script commands, lifecycle).
    Event {
        kind: EventKind,
        frame_index: u64,
        payload: String,
    },
    Finished {
        summary: SessionSummary,
        reason: String,
    },
    Error {
        req_id: Option<u64>,
        message: String,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "payload", rename_all = "snake_case")]
pub enum ToAgent {
    Welcome,
    Rejected {
        reason: String,
    },
    Start {
        req_id: u64,
        session_id: Uuid,
        start_ts_micros: u64,
    },
    Command {
        req_id: u64,
        command: ControlCommand,
    },
    Stop {
        req_id: u64,
    },
}
