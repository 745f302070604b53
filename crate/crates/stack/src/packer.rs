//! Session packing: segments + event log + SRT into the session container.

use std::fs::{self, File};
use std::io::{self, Read};
use std::path::Path;
use std::sync::Arc;

use remcap_core::container::{write_manifest, ContainerLayout};
use remcap_core::segment::SEGMENT_MAGIC;
use remcap_core::srt::SrtError;
use remcap_core::{build_srt, EventKind, SegmentEntry, SessionManifest, SessionStatus};
use serde_json::json;
use tokio::task::JoinHandle;
use uuid::Uuid;

use crate::gateway::{Gateway, GatewayError};
use crate::pubsub::PACKING_CHANNEL;

#[derive(Debug, thiserror::Error)]
pub enum PackError {
    #[error("unknown session {0}")]
    UnknownSession(Uuid),
    #[error("session {session_id} is {status:?}, not STOPPING")]
    SessionNotStopped {
        session_id: Uuid,
        status: SessionStatus,
    },
    #[error("segment {0} is missing")]
    MissingSegment(String),
    #[error("segment {file}: checksum {actual:#010x} does not match {expected:#010x}")]
    ChecksumMismatch {
        file: String,
        expected: u32,
        actual: u32,
    },
    #[error("srt: {0}")]
    Srt(#[from] SrtError),
    #[error("pack i/o: {0}")]
    Io(#[from] io::Error),
}

/// Checks a segment file against its recorded checksum without loading it
/// whole.
pub fn check_segment_file(layout: &ContainerLayout, entry: &SegmentEntry) -> Result<(), PackError> {
    let path = layout.segment_path(&entry.file_name);
    let mut file = match File::open(&path) {
        Ok(f) => f,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(PackError::MissingSegment(entry.file_name.clone()))
        }
        Err(e) => return Err(e.into()),
    };
    let len = file.metadata()?.len();
    let mismatch = |actual| PackError::ChecksumMismatch {
        file: entry.file_name.clone(),
        expected: entry.crc32,
        actual,
    };
    if len < (SEGMENT_MAGIC.len() + 1 + 4) as u64 {
        return Err(mismatch(0));
    }
    let mut hasher = crc32fast::Hasher::new();
    let mut remaining = len - 4;
    let mut buf = vec![0u8; 1 << 20];
    while remaining > 0 {
        let n = remaining.min(buf.len() as u64) as usize;
        file.read_exact(&mut buf[..n])?;
        hasher.update(&buf[..n]);
        remaining -= n as u64;
    }
    let mut trailer = [0u8; 4];
    file.read_exact(&mut trailer)?;
    let computed = hasher.finalize();
    if computed != entry.crc32 {
        return Err(mismatch(computed));
    }
    if u32::from_le_bytes(trailer) != entry.crc32 {
        return Err(mismatch(u32::from_le_bytes(trailer)));
    }
    Ok(())
}

fn write_atomic(path: &Path, contents: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, contents)?;
    fs::rename(tmp, path)
}

/// Packs a stopped session. On an already packed session it re-verifies
/// the segment checksums and returns the existing manifest.
pub async fn pack_session(gw: &Gateway, session_id: Uuid) -> Result<SessionManifest, PackError> {
    let entry = gw
        .entry(session_id)
        .map_err(|_| PackError::UnknownSession(session_id))?;
    let _guard = entry.pack_lock.lock().await;
    let layout = gw.container_layout(session_id);
    let state = entry.snapshot();
    if let Some(manifest) = state.manifest {
        for seg in &manifest.segments {
            check_segment_file(&layout, seg)?;
        }
        return Ok(manifest);
    }
    if state.status != SessionStatus::Stopping {
        return Err(PackError::SessionNotStopped {
            session_id,
            status: state.status,
        });
    }

    let relay_session = gw
        .relay
        .session(session_id)
        .map_err(|_| PackError::UnknownSession(session_id))?;
    let segments = relay_session.segments();
    let stats = relay_session.stats();
    fs::create_dir_all(layout.segments_dir())?;
    for seg in &segments {
        check_segment_file(&layout, seg)?;
    }

    let summary = *entry.summary.lock().unwrap();
    let frame_count = stats
        .captured_hint
        .max(summary.map_or(0, |s| s.captured_frames));
    let incomplete = entry
        .incomplete
        .lock()
        .unwrap()
        .clone()
        .or_else(|| relay_session.error());
    if let Some(reason) = incomplete {
        gw.events
            .append(
                session_id,
                EventKind::Lifecycle,
                frame_count.saturating_sub(1),
                &json!({ "event": "incomplete", "reason": reason }).to_string(),
            )
            .map_err(|e| io::Error::other(e.to_string()))?;
    }

    let mut events = gw
        .events
        .read(session_id, 1)
        .map_err(|_| PackError::UnknownSession(session_id))?;
    events.sort_by_key(|e| (e.frame_index, e.seq));
    let srt_end = events
        .iter()
        .map(|e| e.frame_index)
        .max()
        .unwrap_or(0)
        .max(frame_count);
    let hello = &entry.hello;
    let srt = build_srt(&events, hello.fps, srt_end)?;
    let manifest = SessionManifest {
        session_id,
        scene_id: state.scene_id.clone(),
        device_id: state.device_id,
        fps: hello.fps,
        resolution: hello.resolution,
        start_ts_micros: entry.start_ts_micros,
        frame_count,
        segments,
        deterministic_clock: hello.deterministic_clock,
    };
    write_atomic(&layout.srt_path(), srt.as_bytes())?;
    write_manifest(&layout, &manifest)?;
    // Logged before the status flips so PACKED watchers see it. The SRT is
    // already written and does not carry it.
    gw.events
        .append(
            session_id,
            EventKind::Lifecycle,
            frame_count.saturating_sub(1),
            &json!({ "event": "packed", "frame_count": frame_count, "delivered": manifest.delivered_frames() })
                .to_string(),
        )
        .map_err(|e| io::Error::other(e.to_string()))?;
    if !entry.mark_packed(manifest.clone()) {
        return Err(PackError::SessionNotStopped {
            session_id,
            status: entry.status(),
        });
    }
    Ok(manifest)
}

/// Listens on the packing channel and packs each announced session.
pub fn spawn_packer(gw: Arc<Gateway>) -> JoinHandle<()> {
    let mut sub = gw
        .pubsub
        .subscribe(PACKING_CHANNEL)
        .expect("packing channel name is valid");
    tokio::spawn(async move {
        while let Some(msg) = sub.recv().await {
            let Some(id) = msg
                .payload
                .get("session_id")
                .and_then(|v| v.as_str())
                .and_then(|s| Uuid::parse_str(s).ok())
            else {
                tracing::warn!("ignoring packing message {:?}", msg.payload);
                continue;
            };
            let gw = gw.clone();
            tokio::spawn(async move {
                match pack_session(&gw, id).await {
                    Ok(m) => tracing::info!(session = %id, frames = m.frame_count, "packed"),
                    Err(e) => {
                        tracing::error!(session = %id, "pack failed: {e}");
                        let _ = gw.append_event(
                            id,
                            EventKind::Lifecycle,
                            0,
                            &json!({ "event": "pack_failed", "error": e.to_string() }).to_string(),
                        );
                    }
                }
            });
        }
    })
}

impl From<PackError> for GatewayError {
    fn from(e: PackError) -> Self {
        match e {
            PackError::UnknownSession(id) => GatewayError::UnknownSession(id),
            other => GatewayError::Internal(other.to_string()),
        }
    }
}
