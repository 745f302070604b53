//! Session-level descriptors shared by the control plane, the relay and the
//! packer.

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::resolution::Resolution;

pub const MIN_FPS: u8 = 1;
pub const MAX_FPS: u8 = 120;

pub fn fps_valid(fps: u8) -> bool {
    (MIN_FPS..=MAX_FPS).contains(&fps)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentEntry {
    pub file_name: String,
    pub first_frame_index: u64,
    pub frame_count: u64,
    pub crc32: u32,
}

/// Descriptor of a finished capture. Field order is the key order of
/// `manifest.json`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionManifest {
    pub session_id: Uuid,
    pub scene_id: String,
    pub device_id: u16,
    pub fps: u8,
    pub resolution: Resolution,
    pub start_ts_micros: u64,
    pub frame_count: u64,
    pub segments: Vec<SegmentEntry>,
    pub deterministic_clock: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ManifestError {
    #[error("fps {0} outside 1..=120")]
    BadFps(u8),
    #[error("segment `{file}` starts at frame {first} before the previous segment ends")]
    Overlap { file: String, first: u64 },
    #[error("segment `{0}` is empty")]
    EmptySegment(String),
}

impl SessionManifest {
    pub fn delivered_frames(&self) -> u64 {
        self.segments.iter().map(|s| s.frame_count).sum()
    }

    /// Checks fps range and that segments are ordered and cannot overlap
    /// (each segment spans at least `frame_count` indices).
    pub fn validate(&self) -> Result<(), ManifestError> {
        if !fps_valid(self.fps) {
            return Err(ManifestError::BadFps(self.fps));
        }
        let mut next_free = 0u64;
        for seg in &self.segments {
            if seg.frame_count == 0 {
                return Err(ManifestError::EmptySegment(seg.file_name.clone()));
            }
            if seg.first_frame_index < next_free {
                return Err(ManifestError::Overlap {
                    file: seg.file_name.clone(),
                    first: seg.first_frame_index,
                });
            }
            next_free = seg.first_frame_index + seg.frame_count;
        }
        Ok(())
    }
}

/// Exclusive, expiring right of one researcher to drive a scene.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneLease {
    pub scene_id: String,
    pub holder: String,
    pub acquired_ts_micros: u64,
    pub ttl_seconds: u32,
}

impl SceneLease {
    pub fn expires_at_micros(&self) -> u64 {
        self.acquired_ts_micros + self.ttl_seconds as u64 * 1_000_000
    }

    pub fn is_expired(&self, now_micros: u64) -> bool {
        now_micros >= self.expires_at_micros()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeviceSpec {
    pub device_id: u16,
    #[serde(default)]
    pub capabilities: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub scene_id: String,
    #[serde(default)]
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub description: String,
}

impl SceneConfig {
    pub fn has_device(&self, device_id: u16) -> bool {
        self.devices.iter().any(|d| d.device_id == device_id)
    }

    /// True when no device id appears twice.
    pub fn devices_unique(&self) -> bool {
        let mut ids: Vec<u16> = self.devices.iter().map(|d| d.device_id).collect();
        ids.sort_unstable();
        ids.windows(2).all(|w| w[0] != w[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionStatus {
    Starting,
    Live,
    Stopping,
    Packed,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("session cannot move from {from:?} to {to:?}")]
pub struct BackwardTransition {
    pub from: SessionStatus,
    pub to: SessionStatus,
}

impl SessionStatus {
    /// Status may only move forward; staying put is allowed.
    pub fn can_advance_to(self, to: SessionStatus) -> bool {
        to >= self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: Uuid,
    pub scene_id: String,
    pub device_id: u16,
    pub status: SessionStatus,
    pub manifest: Option<SessionManifest>,
}

impl SessionState {
    pub fn new(session_id: Uuid, scene_id: impl Into<String>, device_id: u16) -> Self {
        SessionState {
            session_id,
            scene_id: scene_id.into(),
            device_id,
            status: SessionStatus::Starting,
            manifest: None,
        }
    }

    pub fn advance(&mut self, to: SessionStatus) -> Result<(), BackwardTransition> {
        if !self.status.can_advance_to(to) || to == SessionStatus::Packed {
            return Err(BackwardTransition {
                from: self.status,
                to,
            });
        }
        self.status = to;
        Ok(())
    }

    /// The only way into `PACKED`, keeping "manifest present iff packed".
    pub fn mark_packed(&mut self, manifest: SessionManifest) -> Result<(), BackwardTransition> {
        if self.status != SessionStatus::Stopping {
            return Err(BackwardTransition {
                from: self.status,
                to: SessionStatus::Packed,
            });
        }
        self.status = SessionStatus::Packed;
        self.manifest = Some(manifest);
        Ok(())
    }
}

/// What a capture run reports when it ends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub captured_frames: u64,
    pub delivered_frames: u64,
    pub dropped_frames: u64,
    pub achieved_fps: f64,
}

/// Relay-side delivery statistics for one session.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestStats {
    pub session_id: Uuid,
    /// Highest frame index seen plus one.
    pub captured_hint: u64,
    pub delivered: u64,
    pub bytes_in: u64,
    pub first_arrival_ts_micros: Option<u64>,
    pub last_arrival_ts_micros: Option<u64>,
    pub achieved_fps: f64,
    /// CRC-32 over the concatenated payloads in arrival order.
    pub payload_crc32: u32,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(segments: Vec<SegmentEntry>) -> SessionManifest {
        SessionManifest {
            session_id: Uuid::nil(),
            scene_id: "lab".into(),
            device_id: 1,
            fps: 30,
            resolution: Resolution::P360,
            start_ts_micros: 0,
            frame_count: 700,
            segments,
            deterministic_clock: true,
        }
    }

    fn seg(first: u64, count: u64) -> SegmentEntry {
        SegmentEntry {
            file_name: format!("{first:08}.seg"),
            first_frame_index: first,
            frame_count: count,
            crc32: 0,
        }
    }

    #[test]
    fn manifest_key_order() {
        let json = serde_json::to_string(&manifest(vec![seg(0, 3)])).unwrap();
        let keys = [
            "session_id",
            "scene_id",
            "device_id",
            "fps",
            "resolution",
            "start_ts_micros",
            "frame_count",
            "segments",
            "deterministic_clock",
        ];
        let positions: Vec<usize> = keys
            .iter()
            .map(|k| json.find(&format!("\"{k}\"")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "{json}");
    }

    #[test]
    fn manifest_validation() {
        assert!(manifest(vec![seg(0, 300), seg(300, 300), seg(600, 50)])
            .validate()
            .is_ok());
        assert!(matches!(
            manifest(vec![seg(0, 300), seg(299, 1)]).validate(),
            Err(ManifestError::Overlap { .. })
        ));
        let mut m = manifest(vec![]);
        m.fps = 0;
        assert_eq!(m.validate(), Err(ManifestError::BadFps(0)));
        assert_eq!(manifest(vec![seg(0, 3), seg(5, 2)]).delivered_frames(), 5);
    }

    #[test]
    fn lease_expiry() {
        let lease = SceneLease {
            scene_id: "s".into(),
            holder: "r".into(),
            acquired_ts_micros: 1_000_000,
            ttl_seconds: 2,
        };
        assert_eq!(lease.expires_at_micros(), 3_000_000);
        assert!(!lease.is_expired(2_999_999));
        assert!(lease.is_expired(3_000_000));
    }

    #[test]
    fn status_only_moves_forward() {
        let mut s = SessionState::new(Uuid::nil(), "s", 1);
        s.advance(SessionStatus::Live).unwrap();
        assert!(s.advance(SessionStatus::Starting).is_err());
        assert!(s.advance(SessionStatus::Packed).is_err());
        s.advance(SessionStatus::Stopping).unwrap();
        s.mark_packed(manifest(vec![])).unwrap();
        assert!(s.manifest.is_some());
        assert!(s.advance(SessionStatus::Stopping).is_err());
    }
}
