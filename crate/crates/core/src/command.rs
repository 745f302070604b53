use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// A steering, speed or camera instruction. Serialized as
/// `{"kind":"SET_SPEED","value":50}`; `STOP` carries no value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CommandKind {
    /// Percent of maximum speed, -100..=100.
    SetSpeed(i32),
    /// Front-wheel angle in degrees, -30..=30.
    SetSteering(i32),
    /// Camera pan in degrees, -90..=90.
    SetCamPan(i32),
    /// Camera tilt in degrees, -35..=65.
    SetCamTilt(i32),
    Stop,
}

impl CommandKind {
    pub const fn name(&self) -> &'static str {
        match self {
            CommandKind::SetSpeed(_) => "SET_SPEED",
            CommandKind::SetSteering(_) => "SET_STEERING",
            CommandKind::SetCamPan(_) => "SET_CAM_PAN",
            CommandKind::SetCamTilt(_) => "SET_CAM_TILT",
            CommandKind::Stop => "STOP",
        }
    }

    /// Allowed argument range, `None` for `STOP`.
    pub const fn range(&self) -> Option<(i32, i32)> {
        match self {
            CommandKind::SetSpeed(_) => Some((-100, 100)),
            CommandKind::SetSteering(_) => Some((-30, 30)),
            CommandKind::SetCamPan(_) => Some((-90, 90)),
            CommandKind::SetCamTilt(_) => Some((-35, 65)),
            CommandKind::Stop => None,
        }
    }

    pub const fn value(&self) -> Option<i32> {
        match *self {
            CommandKind::SetSpeed(v)
            | CommandKind::SetSteering(v)
            | CommandKind::SetCamPan(v)
            | CommandKind::SetCamTilt(v) => Some(v),
            CommandKind::Stop => None,
        }
    }

    pub fn in_range(&self) -> bool {
        match (self.value(), self.range()) {
            (Some(v), Some((lo, hi))) => (lo..=hi).contains(&v),
            _ => true,
        }
    }

    /// The same command with its argument clamped into range.
    pub fn clamped(self) -> Self {
        let Some((lo, hi)) = self.range() else {
            return self;
        };
        match self {
            CommandKind::SetSpeed(v) => CommandKind::SetSpeed(v.clamp(lo, hi)),
            CommandKind::SetSteering(v) => CommandKind::SetSteering(v.clamp(lo, hi)),
            CommandKind::SetCamPan(v) => CommandKind::SetCamPan(v.clamp(lo, hi)),
            CommandKind::SetCamTilt(v) => CommandKind::SetCamTilt(v.clamp(lo, hi)),
            CommandKind::Stop => CommandKind::Stop,
        }
    }

    /// Canonical JSON (sorted keys, no whitespace), used as the COMMAND event payload.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("command serializes")
    }

    pub fn from_parts(name: &str, value: Option<i32>) -> Result<Self, ParseCommandError> {
        let need =
            |v: Option<i32>| v.ok_or_else(|| ParseCommandError::MissingValue(name.to_string()));
        Ok(match name {
            "SET_SPEED" => CommandKind::SetSpeed(need(value)?),
            "SET_STEERING" => CommandKind::SetSteering(need(value)?),
            "SET_CAM_PAN" => CommandKind::SetCamPan(need(value)?),
            "SET_CAM_TILT" => CommandKind::SetCamTilt(need(value)?),
            "STOP" => CommandKind::Stop,
            other => return Err(ParseCommandError::UnknownKind(other.to_string())),
        })
    }
}

impl fmt::Display for CommandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.value() {
            Some(v) => write!(f, "{} {}", self.name(), v),
            None => f.write_str(self.name()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParseCommandError {
    #[error("unknown command kind `{0}`")]
    UnknownKind(String),
    #[error("command `{0}` needs a value")]
    MissingValue(String),
    #[error("invalid command value `{0}`")]
    BadValue(String),
}

impl FromStr for CommandKind {
    type Err = ParseCommandError;

    /// Parses `KIND [value]`, e.g. `SET_SPEED 50` or `STOP`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split_whitespace();
        let name = parts.next().unwrap_or_default();
        let value = parts
            .next()
            .map(|v| {
                v.parse::<i32>()
                    .map_err(|_| ParseCommandError::BadValue(v.to_string()))
            })
            .transpose()?;
        Self::from_parts(name, value)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub client_seq: u64,
    #[serde(flatten)]
    pub kind: CommandKind,
    pub issued_ts_micros: u64,
}

/// A command acknowledged by the device, stamped with the first frame
/// rendered under it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppliedCommand {
    pub command: ControlCommand,
    pub applied_frame_index: u64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_payloads() {
        assert_eq!(
            CommandKind::SetSpeed(50).canonical_json(),
            r#"{"kind":"SET_SPEED","value":50}"#
        );
        assert_eq!(CommandKind::Stop.canonical_json(), r#"{"kind":"STOP"}"#);
    }

    #[test]
    fn clamping() {
        assert_eq!(
            CommandKind::SetSteering(45).clamped(),
            CommandKind::SetSteering(30)
        );
        assert_eq!(
            CommandKind::SetCamTilt(-90).clamped(),
            CommandKind::SetCamTilt(-35)
        );
        assert_eq!(
            CommandKind::SetSpeed(-100).clamped(),
            CommandKind::SetSpeed(-100)
        );
        assert!(!CommandKind::SetCamPan(91).in_range());
        assert!(CommandKind::Stop.in_range());
    }

    #[test]
    fn parse_text() {
        assert_eq!(
            "SET_SPEED 50".parse::<CommandKind>().unwrap(),
            CommandKind::SetSpeed(50)
        );
        assert_eq!("STOP".parse::<CommandKind>().unwrap(), CommandKind::Stop);
        assert!(matches!(
            "SET_SPEED".parse::<CommandKind>(),
            Err(ParseCommandError::MissingValue(_))
        ));
        assert!(matches!(
            "JUMP 3".parse::<CommandKind>(),
            Err(ParseCommandError::UnknownKind(_))
        ));
    }

    #[test]
    fn control_command_json_is_flat() {
        let cmd = ControlCommand {
            client_seq: 3,
            kind: CommandKind::SetCamPan(-10),
            issued_ts_micros: 7,
        };
        let json = serde_json::to_value(cmd).unwrap();
        assert_eq!(json["kind"], "SET_CAM_PAN");
        assert_eq!(json["value"], -10);
        assert_eq!(json["client_seq"], 3);
        let back: ControlCommand = serde_json::from_value(json).unwrap();
        assert_eq!(back, cmd);
        let stop: ControlCommand =
            serde_json::from_str(r#"{"client_seq":1,"kind":"STOP","issued_ts_micros":0}"#).unwrap();
        assert_eq!(stop.kind, CommandKind::Stop);
    }
}
