use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EventKind {
    Command,
    Inference,
    Marker,
    Lifecycle,
}

impl EventKind {
    pub const fn name(self) -> &'static str {
        match self {
            EventKind::Command => "COMMAND",
            EventKind::Inference => "INFERENCE",
            EventKind::Marker => "MARKER",
            EventKind::Lifecycle => "LIFECYCLE",
        }
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "COMMAND" => Ok(EventKind::Command),
            "INFERENCE" => Ok(EventKind::Inference),
            "MARKER" => Ok(EventKind::Marker),
            "LIFECYCLE" => Ok(EventKind::Lifecycle),
            other => Err(format!("unknown event kind `{other}`")),
        }
    }
}

/// An append-only log entry. `payload` is compact JSON text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub session_id: Uuid,
    pub seq: u64,
    pub kind: EventKind,
    pub frame_index: u64,
    pub ts_micros: u64,
    pub payload: String,
}
