//! Per-frame processors and the task that runs one over a session's stream.

use std::sync::Arc;
use std::time::Duration;

use remcap_core::detect::{annotate, detect_marker, Detection};
use remcap_core::{EventKind, FrameRecord};
use serde_json::json;
use tokio::task::JoinHandle;
use uuid::Uuid;

use crate::eventlog::EventStore;
use crate::relay::{IngestPhase, Relay};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("{0}")]
pub struct ProcessorError(pub String);

/// A pure function from a frame to an annotated frame plus detections.
pub trait FrameProcessor: Send + Sync + 'static {
    fn name(&self) -> &str;
    fn process(&self, frame: &FrameRecord)
        -> Result<(FrameRecord, Vec<Detection>), ProcessorError>;
}

/// The deterministic marker detector.
#[derive(Debug, Default, Clone, Copy)]
pub struct MarkerDetector;

impl FrameProcessor for MarkerDetector {
    fn name(&self) -> &str {
        "marker"
    }

    fn process(
        &self,
        frame: &FrameRecord,
    ) -> Result<(FrameRecord, Vec<Detection>), ProcessorError> {
        let detections = detect_marker(frame);
        let annotated = annotate(frame, &detections).map_err(|e| ProcessorError(e.to_string()))?;
        Ok((annotated, detections))
    }
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Passthrough;

impl FrameProcessor for Passthrough {
    fn name(&self) -> &str {
        "noop"
    }

    fn process(
        &self,
        frame: &FrameRecord,
    ) -> Result<(FrameRecord, Vec<Detection>), ProcessorError> {
        Ok((frame.clone(), Vec::new()))
    }
}

pub const BUILTIN_PROCESSORS: [&str; 2] = ["marker", "noop"];

pub fn builtin_processor(name: &str) -> Option<Arc<dyn FrameProcessor>> {
    match name {
        "marker" => Some(Arc::new(MarkerDetector)),
        "noop" => Some(Arc::new(Passthrough)),
        _ => None,
    }
}

pub fn inference_payload(frame_index: u64, detections: &[Detection]) -> String {
    json!({ "frame": frame_index, "detections": detections }).to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum InferenceError {
    #[error("session {0} is not live")]
    SessionNotLive(Uuid),
    #[error("unknown processor `{0}`")]
    UnknownProcessor(String),
}

/// What a processor task did over its lifetime.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProcessorReport {
    pub processed: u64,
    pub failed: u64,
    pub late: u64,
    pub skipped: u64,
}

/// Runs `processor` over every frame the relay delivers for `session_id`
/// until the stream ends. Each frame has one frame interval to finish;
/// late frames go to the processed feed unannotated, though their
/// detections are still logged once ready. With `feeds_view` the output
/// goes to the session's processed feed.
pub fn attach_processor(
    relay: &Relay,
    events: Arc<EventStore>,
    session_id: Uuid,
    processor: Arc<dyn FrameProcessor>,
    feeds_view: bool,
) -> Result<JoinHandle<ProcessorReport>, InferenceError> {
    let session = relay
        .session(session_id)
        .map_err(|_| InferenceError::SessionNotLive(session_id))?;
    if session.phase() == IngestPhase::Finished {
        return Err(InferenceError::SessionNotLive(session_id));
    }
    let mut feed = relay
        .subscribe_live(session_id)
        .map_err(|_| InferenceError::SessionNotLive(session_id))?;
    let out = if feeds_view {
        relay.processed_sender(session_id).ok()
    } else {
        None
    };
    let deadline = Duration::from_secs_f64(1.0 / session.spec.fps as f64);
    let name = processor.name().to_string();

    Ok(tokio::spawn(async move {
        let mut report = ProcessorReport::default();
        let warn = |frame_index: u64, body: serde_json::Value| {
            let _ = events.append(
                session_id,
                EventKind::Lifecycle,
                frame_index,
                &body.to_string(),
            );
        };
        while let Some(frame) = feed.recv().await {
            let idx = frame.frame_index;
            if feed.skipped() > report.skipped {
                warn(
                    idx,
                    json!({"event": "processor_lag", "processor": name, "skipped": feed.skipped() - report.skipped}),
                );
                report.skipped = feed.skipped();
            }
            let p = processor.clone();
            let input = frame.clone();
            let mut job = tokio::task::spawn_blocking(move || p.process(&input));
            let (result, in_time) = match tokio::time::timeout(deadline, &mut job).await {
                Ok(r) => (r, true),
                Err(_) => {
                    report.late += 1;
                    if let Some(tx) = &out {
                        let _ = tx.send(frame.clone());
                    }
                    (job.await, false)
                }
            };
            let result = match result {
                Ok(r) => r,
                Err(join) => Err(ProcessorError(format!("processor panicked: {join}"))),
            };
            match result {
                Ok((annotated, detections)) => {
                    report.processed += 1;
                    let _ = events.append(
                        session_id,
                        EventKind::Inference,
                        idx,
                        &inference_payload(idx, &detections),
                    );
                    if in_time {
                        if let Some(tx) = &out {
                            let _ = tx.send(Arc::new(annotated));
                        }
                    }
                }
                Err(e) => {
                    report.failed += 1;
                    warn(
                        idx,
                        json!({"event": "processor_error", "processor": name, "frame": idx, "error": e.0}),
                    );
                    if in_time {
                        if let Some(tx) = &out {
                            let _ = tx.send(frame);
                        }
                    }
                }
            }
        }
        report
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use remcap_core::{render_frame, Encoding, FrameStamp, Pose, Resolution};

    #[test]
    fn marker_detector_finds_and_outlines() {
        let pose = Pose {
            x: 5.0,
            y: 5.0,
            ..Pose::origin()
        };
        let stamp = FrameStamp {
            session_id: Uuid::nil(),
            device_id: 1,
            capture_ts_micros: 0,
        };
        let frame = render_frame(&pose, 3, Resolution::P360, stamp, Encoding::RawRgb24);
        let (annotated, dets) = MarkerDetector.process(&frame).unwrap();
        assert_eq!(dets.len(), 1);
        assert_eq!(
            (dets[0].x, dets[0].y, dets[0].w, dets[0].h),
            (303, 163, 32, 32)
        );
        assert_eq!(annotated.frame_index, 3);
        assert_ne!(annotated.payload, frame.payload);
        // Red outline pixel just left of the box.
        let off = (163 * 640 + 302) * 3;
        assert_eq!(&annotated.payload[off..off + 3], &[255, 0, 0]);
    }

    #[test]
    fn payload_shape() {
        let det = Detection {
            x: 1,
            y: 2,
            w: 32,
            h: 32,
            label: "marker".into(),
            score: 1.0,
        };
        let canonical = crate::eventlog::canonical_payload(&inference_payload(7, &[det])).unwrap();
        assert_eq!(
            canonical,
            r#"{"detections":[{"h":32,"label":"marker","score":1.0,"w":32,"x":1,"y":2}],"frame":7}"#
        );
        assert!(builtin_processor("marker").is_some());
        assert!(builtin_processor("yolo").is_none());
    }
}
