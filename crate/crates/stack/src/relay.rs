//! Stream relay: accepts EXHS/EXFR ingest connections, writes segment
//! files, fans frames out to live subscribers and keeps delivery stats.

use std::collections::HashMap;
use std::fs::{self, File};
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use remcap_core::container::ContainerLayout;
use remcap_core::frame::{FrameHeader, FRAME_HEADER_LEN};
use remcap_core::header::{SessionHeader, SESSION_HEADER_LEN};
use remcap_core::segment::{segment_file_name, SegmentWriter, FRAMES_PER_SEGMENT};
use remcap_core::{EventKind, FrameRecord, IngestStats, Resolution, SegmentEntry};
use serde_json::json;
use tokio::io::{AsyncRead, AsyncReadExt};
use tokio::net::TcpListener;
use tokio::sync::{broadcast, watch};
use uuid::Uuid;

use crate::clock::wall_micros;
use crate::eventlog::EventStore;

/// Per-viewer queue depth; a viewer further behind loses the oldest frames.
pub const LIVE_QUEUE_FRAMES: usize = 8;

#[derive(Debug, thiserror::Error)]
pub enum RelayError {
    #[error("unknown session {0}")]
    UnknownSession(Uuid),
    #[error("frame index {got} does not follow {previous}")]
    NonMonotoneIndex { previous: u64, got: u64 },
    #[error("decode error: {0}")]
    DecodeError(String),
    #[error("session {0} already has an ingest stream")]
    AlreadyStreaming(Uuid),
    #[error("stream for session {session_id} came from device {got}, expected {expected}")]
    WrongDevice {
        session_id: Uuid,
        expected: u16,
        got: u16,
    },
    #[error("relay i/o: {0}")]
    Io(#[from] io::Error),
}

/// What the gateway tells the relay to expect for a session.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamSpec {
    pub device_id: u16,
    pub fps: u8,
    pub resolution: Resolution,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IngestPhase {
    Waiting,
    Streaming,
    Finished,
}

#[derive(Default)]
struct Counters {
    captured_hint: u64,
    delivered: u64,
    bytes_in: u64,
    first_arrival: Option<u64>,
    last_arrival: Option<u64>,
    crc: crc32fast::Hasher,
}

pub struct RelaySession {
    pub session_id: Uuid,
    pub spec: StreamSpec,
    raw: Mutex<Option<broadcast::Sender<Arc<FrameRecord>>>>,
    annotated: Mutex<Option<broadcast::Sender<Arc<FrameRecord>>>>,
    counters: Mutex<Counters>,
    segments: Mutex<Vec<SegmentEntry>>,
    phase: watch::Sender<IngestPhase>,
    error: Mutex<Option<String>>,
}

impl RelaySession {
    fn new(session_id: Uuid, spec: StreamSpec) -> Self {
        RelaySession {
            session_id,
            spec,
            raw: Mutex::new(Some(broadcast::channel(LIVE_QUEUE_FRAMES).0)),
            annotated: Mutex::new(Some(broadcast::channel(LIVE_QUEUE_FRAMES).0)),
            counters: Mutex::new(Counters::default()),
            segments: Mutex::new(Vec::new()),
            phase: watch::channel(IngestPhase::Waiting).0,
            error: Mutex::new(None),
        }
    }

    pub fn phase(&self) -> IngestPhase {
        *self.phase.borrow()
    }

    pub fn stats(&self) -> IngestStats {
        let c = self.counters.lock().unwrap();
        let achieved_fps = match (c.first_arrival, c.last_arrival) {
            (Some(first), Some(last)) if c.delivered > 0 => {
                let active = (last - first) as f64 / 1e6 + 1.0 / self.spec.fps as f64;
                c.delivered as f64 / active
            }
            _ => 0.0,
        };
        IngestStats {
            session_id: self.session_id,
            captured_hint: c.captured_hint,
            delivered: c.delivered,
            bytes_in: c.bytes_in,
            first_arrival_ts_micros: c.first_arrival,
            last_arrival_ts_micros: c.last_arrival,
            achieved_fps,
            payload_crc32: c.crc.clone().finalize(),
        }
    }

    /// Finalized segments so far, in order.
    pub fn segments(&self) -> Vec<SegmentEntry> {
        self.segments.lock().unwrap().clone()
    }

    /// Why the ingest stream ended abnormally, if it did.
    pub fn error(&self) -> Option<String> {
        self.error.lock().unwrap().clone()
    }

    fn finish(&self) {
        self.raw.lock().unwrap().take();
        self.annotated.lock().unwrap().take();
        self.phase.send_replace(IngestPhase::Finished);
    }
}

/// A subscriber's view of a frame stream.
pub struct LiveFeed {
    rx: broadcast::Receiver<Arc<FrameRecord>>,
    skipped: u64,
}

impl LiveFeed {
    /// Next frame, skipping over anything this viewer was too slow for.
    /// `None` once the stream has ended.
    pub async fn recv(&mut self) -> Option<Arc<FrameRecord>> {
        loop {
            match self.rx.recv().await {
                Ok(f) => return Some(f),
                Err(broadcast::error::RecvError::Lagged(n)) => self.skipped += n,
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    }

    /// Frames dropped for this viewer so far.
    pub fn skipped(&self) -> u64 {
        self.skipped
    }
}

pub struct Relay {
    data_dir: PathBuf,
    events: Option<Arc<EventStore>>,
    sessions: RwLock<HashMap<Uuid, Arc<RelaySession>>>,
    active: AtomicUsize,
    peak: AtomicUsize,
}

impl Relay {
    pub fn new(data_dir: impl Into<PathBuf>, events: Option<Arc<EventStore>>) -> Self {
        Relay {
            data_dir: data_dir.into(),
            events,
            sessions: RwLock::new(HashMap::new()),
            active: AtomicUsize::new(0),
            peak: AtomicUsize::new(0),
        }
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    /// Prepares to accept the stream of a session.
    pub fn register(&self, session_id: Uuid, spec: StreamSpec) -> Arc<RelaySession> {
        self.sessions
            .write()
            .unwrap()
            .entry(session_id)
            .or_insert_with(|| Arc::new(RelaySession::new(session_id, spec)))
            .clone()
    }

    pub fn session(&self, session_id: Uuid) -> Result<Arc<RelaySession>, RelayError> {
        self.sessions
            .read()
            .unwrap()
            .get(&session_id)
            .cloned()
            .ok_or(RelayError::UnknownSession(session_id))
    }

    pub fn stats(&self, session_id: Uuid) -> Result<IngestStats, RelayError> {
        Ok(self.session(session_id)?.stats())
    }

    /// Raw frames as they arrive.
    pub fn subscribe_live(&self, session_id: Uuid) -> Result<LiveFeed, RelayError> {
        let s = self.session(session_id)?;
        let rx = s.raw.lock().unwrap().as_ref().map(|tx| tx.subscribe());
        rx.map(|rx| LiveFeed { rx, skipped: 0 })
            .ok_or(RelayError::UnknownSession(session_id))
    }

    /// Frames after the session's first processor, raw or annotated.
    pub fn subscribe_processed(&self, session_id: Uuid) -> Result<LiveFeed, RelayError> {
        let s = self.session(session_id)?;
        let rx = s
            .annotated
            .lock()
            .unwrap()
            .as_ref()
            .map(|tx| tx.subscribe());
        rx.map(|rx| LiveFeed { rx, skipped: 0 })
            .ok_or(RelayError::UnknownSession(session_id))
    }

    /// Sender for processor output, while the session is open.
    pub fn processed_sender(
        &self,
        session_id: Uuid,
    ) -> Result<broadcast::Sender<Arc<FrameRecord>>, RelayError> {
        let s = self.session(session_id)?;
        let tx = s.annotated.lock().unwrap().clone();
        tx.ok_or(RelayError::UnknownSession(session_id))
    }

    /// Ends a session whose stream never arrived.
    pub fn abandon(&self, session_id: Uuid) {
        if let Ok(s) = self.session(session_id) {
            if s.phase.send_if_modified(|p| {
                let waiting = *p == IngestPhase::Waiting;
                if waiting {
                    *p = IngestPhase::Finished;
                }
                waiting
            }) {
                s.raw.lock().unwrap().take();
                s.annotated.lock().unwrap().take();
            }
        }
    }

    /// Waits until the session's stream has ended; false on timeout.
    pub async fn wait_finished(&self, session_id: Uuid, timeout: Duration) -> bool {
        let Ok(s) = self.session(session_id) else {
            return false;
        };
        let mut rx = s.phase.subscribe();
        tokio::time::timeout(timeout, rx.wait_for(|p| *p == IngestPhase::Finished))
            .await
            .is_ok_and(|r| r.is_ok())
    }

    pub fn active_ingests(&self) -> usize {
        self.active.load(Ordering::SeqCst)
    }

    /// Most ingest connections open at once since startup.
    pub fn peak_ingests(&self) -> usize {
        self.peak.load(Ordering::SeqCst)
    }

    /// Accept loop; one task per connection.
    pub async fn serve(self: Arc<Self>, listener: TcpListener) {
        loop {
            let (stream, peer) = match listener.accept().await {
                Ok(c) => c,
                Err(e) => {
                    tracing::warn!("relay accept failed: {e}");
                    continue;
                }
            };
            let _ = stream.set_nodelay(true);
            let relay = self.clone();
            tokio::spawn(async move {
                match relay.ingest_stream(stream).await {
                    Ok(stats) => tracing::info!(
                        session = %stats.session_id,
                        delivered = stats.delivered,
                        "ingest from {peer} closed"
                    ),
                    Err(e) => tracing::warn!("ingest from {peer} failed: {e}"),
                }
            });
        }
    }

    /// Consumes one agent connection until it closes.
    pub async fn ingest_stream<R: AsyncRead + Unpin>(
        &self,
        conn: R,
    ) -> Result<IngestStats, RelayError> {
        let mut conn = tokio::io::BufReader::with_capacity(1 << 20, conn);
        let mut hdr = [0u8; SESSION_HEADER_LEN];
        conn.read_exact(&mut hdr)
            .await
            .map_err(|e| RelayError::DecodeError(format!("session header: {e}")))?;
        let header =
            SessionHeader::decode(&hdr).map_err(|e| RelayError::DecodeError(e.to_string()))?;
        let session = self.session(header.session_id)?;
        if header.device_id != session.spec.device_id {
            return Err(RelayError::WrongDevice {
                session_id: header.session_id,
                expected: session.spec.device_id,
                got: header.device_id,
            });
        }
        let started = session.phase.send_if_modified(|p| {
            let waiting = *p == IngestPhase::Waiting;
            if waiting {
                *p = IngestPhase::Streaming;
            }
            waiting
        });
        if !started {
            return Err(RelayError::AlreadyStreaming(header.session_id));
        }

        let now_active = self.active.fetch_add(1, Ordering::SeqCst) + 1;
        self.peak.fetch_max(now_active, Ordering::SeqCst);
        let mut ingest = Ingest {
            session: &session,
            layout: ContainerLayout::for_session(&self.data_dir, header.session_id),
            writer: None,
            last_index: None,
        };
        let result = ingest.pump(&mut conn).await;
        let closed = ingest.close_segment();
        self.active.fetch_sub(1, Ordering::SeqCst);
        let result = result.and(closed.map_err(RelayError::from));

        if let Err(e) = &result {
            *session.error.lock().unwrap() = Some(e.to_string());
            if let Some(events) = &self.events {
                let payload = json!({ "event": "ingest_error", "error": e.to_string() });
                let _ = events.append(
                    session.session_id,
                    EventKind::Lifecycle,
                    ingest.last_index.unwrap_or(0),
                    &payload.to_string(),
                );
            }
        }
        session.finish();
        result.map(|_| session.stats())
    }
}

struct Ingest<'a> {
    session: &'a RelaySession,
    layout: ContainerLayout,
    writer: Option<SegmentWriter<BufWriter<File>>>,
    last_index: Option<u64>,
}

impl Ingest<'_> {
    async fn pump<R: AsyncRead + Unpin>(&mut self, conn: &mut R) -> Result<(), RelayError> {
        fs::create_dir_all(self.layout.segments_dir())?;
        let raw = self.session.raw.lock().unwrap().clone();
        let mut record = Vec::new();
        loop {
            record.resize(FRAME_HEADER_LEN, 0);
            if !read_header(conn, &mut record).await? {
                return Ok(());
            }
            let header =
                FrameHeader::parse(&record).map_err(|e| RelayError::DecodeError(e.to_string()))?;
            if header.session_id != self.session.session_id {
                return Err(RelayError::DecodeError(format!(
                    "record for session {} on stream of {}",
                    header.session_id, self.session.session_id
                )));
            }
            record.resize(header.record_len(), 0);
            conn.read_exact(&mut record[FRAME_HEADER_LEN..])
                .await
                .map_err(|e| {
                    RelayError::DecodeError(format!("frame {} payload: {e}", header.frame_index))
                })?;
            let frame =
                FrameRecord::decode(&record).map_err(|e| RelayError::DecodeError(e.to_string()))?;
            if let Some(previous) = self.last_index {
                if frame.frame_index <= previous {
                    return Err(RelayError::NonMonotoneIndex {
                        previous,
                        got: frame.frame_index,
                    });
                }
            }
            self.last_index = Some(frame.frame_index);

            if self.writer.is_none() {
                let path = self
                    .layout
                    .segment_path(&segment_file_name(frame.frame_index));
                self.writer = Some(SegmentWriter::new(BufWriter::with_capacity(
                    1 << 20,
                    File::create(path)?,
                ))?);
            }
            let writer = self.writer.as_mut().expect("writer just opened");
            writer.append_encoded(frame.frame_index, &record)?;
            if writer.frames() >= FRAMES_PER_SEGMENT {
                self.close_segment()?;
            }

            {
                let now = wall_micros();
                let mut c = self.session.counters.lock().unwrap();
                c.captured_hint = c.captured_hint.max(frame.frame_index + 1);
                c.delivered += 1;
                c.bytes_in += record.len() as u64;
                c.first_arrival.get_or_insert(now);
                c.last_arrival = Some(now);
                c.crc.update(&frame.payload);
            }
            if let Some(tx) = &raw {
                let _ = tx.send(Arc::new(frame));
            }
        }
    }

    fn close_segment(&mut self) -> io::Result<()> {
        let Some(writer) = self.writer.take() else {
            return Ok(());
        };
        let first = writer
            .first_frame_index()
            .expect("segments open on their first frame");
        let frames = writer.frames();
        let (file, crc32) = writer.finish()?;
        file.into_inner().map_err(|e| e.into_error())?.sync_data()?;
        self.session.segments.lock().unwrap().push(SegmentEntry {
            file_name: segment_file_name(first),
            first_frame_index: first,
            frame_count: frames,
            crc32,
        });
        Ok(())
    }
}

/// Fills `buf` with a record header. `Ok(false)` on a clean end of stream.
async fn read_header<R: AsyncRead + Unpin>(
    conn: &mut R,
    buf: &mut [u8],
) -> Result<bool, RelayError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = conn.read(&mut buf[filled..]).await?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(RelayError::DecodeError(
                FrameHeader::parse(&buf[..filled])
                    .err()
                    .map_or_else(|| "truncated record header".to_string(), |e| e.to_string()),
            ));
        }
        filled += n;
    }
    Ok(true)
}
