//! Append-only per-session event store.
//!
//! Each session has an in-memory index plus a JSON-lines file under
//! `<dir>/<session-uuid>.jsonl`. Appends for one session are serialized by
//! that session's lock, which also orders publication on
//! `session.<id>.events`.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use remcap_core::{EventKind, EventRecord};
use uuid::Uuid;

use crate::clock::Clock;
use crate::pubsub::{session_events_channel, PubSub};

#[derive(Debug, thiserror::Error)]
pub enum EventError {
    #[error("unknown session {0}")]
    UnknownSession(Uuid),
    #[error("payload is not valid JSON: {0}")]
    MalformedPayload(String),
    #[error("event log i/o: {0}")]
    Io(#[from] io::Error),
}

/// Parses `payload` and re-serializes it compactly with sorted keys.
pub fn canonical_payload(payload: &str) -> Result<String, EventError> {
    let value: serde_json::Value =
        serde_json::from_str(payload).map_err(|e| EventError::MalformedPayload(e.to_string()))?;
    Ok(serde_json::to_string(&value).expect("json value serializes"))
}

struct SessionLog {
    events: Vec<EventRecord>,
    file: File,
}

pub struct EventStore {
    dir: PathBuf,
    pubsub: Arc<PubSub>,
    clock: Arc<dyn Clock>,
    sessions: RwLock<HashMap<Uuid, Arc<Mutex<SessionLog>>>>,
}

impl EventStore {
    /// Opens the store, loading any session logs already in `dir`.
    pub fn open(
        dir: impl Into<PathBuf>,
        pubsub: Arc<PubSub>,
        clock: Arc<dyn Clock>,
    ) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let mut sessions = HashMap::new();
        for entry in fs::read_dir(&dir)? {
            let path = entry?.path();
            let Some(id) = path
                .file_stem()
                .filter(|_| path.extension().is_some_and(|e| e == "jsonl"))
                .and_then(|s| s.to_str())
                .and_then(|s| Uuid::parse_str(s).ok())
            else {
                continue;
            };
            let events = load_log(&path)?;
            let file = OpenOptions::new().append(true).open(&path)?;
            sessions.insert(id, Arc::new(Mutex::new(SessionLog { events, file })));
        }
        Ok(EventStore {
            dir,
            pubsub,
            clock,
            sessions: RwLock::new(sessions),
        })
    }

    fn log_path(&self, session_id: Uuid) -> PathBuf {
        self.dir.join(format!("{session_id}.jsonl"))
    }

    /// Creates an empty log; a no-op if the session already has one.
    pub fn create_session(&self, session_id: Uuid) -> Result<(), EventError> {
        let mut sessions = self.sessions.write().unwrap();
        if sessions.contains_key(&session_id) {
            return Ok(());
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.log_path(session_id))?;
        sessions.insert(
            session_id,
            Arc::new(Mutex::new(SessionLog {
                events: Vec::new(),
                file,
            })),
        );
        Ok(())
    }

    pub fn contains(&self, session_id: Uuid) -> bool {
        self.sessions.read().unwrap().contains_key(&session_id)
    }

    fn log(&self, session_id: Uuid) -> Result<Arc<Mutex<SessionLog>>, EventError> {
        self.sessions
            .read()
            .unwrap()
            .get(&session_id)
            .cloned()
            .ok_or(EventError::UnknownSession(session_id))
    }

    /// Appends with the next gapless seq and publishes the record.
    pub fn append(
        &self,
        session_id: Uuid,
        kind: EventKind,
        frame_index: u64,
        payload_json: &str,
    ) -> Result<EventRecord, EventError> {
        let payload = canonical_payload(payload_json)?;
        let log = self.log(session_id)?;
        let mut log = log.lock().unwrap();
        let record = EventRecord {
            session_id,
            seq: log.events.len() as u64 + 1,
            kind,
            frame_index,
            ts_micros: self.clock.now_micros(),
            payload,
        };
        let mut line = serde_json::to_vec(&record).expect("event serializes");
        line.push(b'\n');
        log.file.write_all(&line)?;
        log.events.push(record.clone());
        self.pubsub.publish(
            &session_events_channel(session_id),
            serde_json::to_value(&record).expect("event serializes"),
        );
        Ok(record)
    }

    /// All events with `seq >= from_seq`, in order.
    pub fn read(&self, session_id: Uuid, from_seq: u64) -> Result<Vec<EventRecord>, EventError> {
        let log = self.log(session_id)?;
        let log = log.lock().unwrap();
        let skip = from_seq.saturating_sub(1) as usize;
        Ok(log.events.iter().skip(skip).cloned().collect())
    }

    pub fn len(&self, session_id: Uuid) -> Result<u64, EventError> {
        Ok(self.log(session_id)?.lock().unwrap().events.len() as u64)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
}

fn load_log(path: &Path) -> io::Result<Vec<EventRecord>> {
    let mut events = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        // A torn final line from a crash is dropped; anything after it would
        // break the gapless numbering.
        match serde_json::from_str::<EventRecord>(&line) {
            Ok(ev) if ev.seq == events.len() as u64 + 1 => events.push(ev),
            _ => break,
        }
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SystemClock;

    fn store(dir: &Path) -> EventStore {
        EventStore::open(dir, Arc::new(PubSub::default()), Arc::new(SystemClock)).unwrap()
    }

    #[test]
    fn seqs_start_at_one() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let id = Uuid::new_v4();
        s.create_session(id).unwrap();
        assert_eq!(s.append(id, EventKind::Marker, 0, "{}").unwrap().seq, 1);
        assert_eq!(s.append(id, EventKind::Marker, 0, "{}").unwrap().seq, 2);
        assert_eq!(s.read(id, 1).unwrap().len(), 2);
        assert_eq!(s.read(id, 2).unwrap()[0].seq, 2);
        assert!(s.read(id, 3).unwrap().is_empty());
    }

    #[test]
    fn payload_is_canonical() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let id = Uuid::new_v4();
        s.create_session(id).unwrap();
        let ev = s
            .append(
                id,
                EventKind::Command,
                3,
                "{ \"value\": 50,\n \"kind\": \"SET_SPEED\" }",
            )
            .unwrap();
        assert_eq!(ev.payload, r#"{"kind":"SET_SPEED","value":50}"#);
    }

    #[test]
    fn rejects_bad_payload_and_unknown_session() {
        let tmp = tempfile::tempdir().unwrap();
        let s = store(tmp.path());
        let id = Uuid::new_v4();
        assert!(matches!(
            s.append(id, EventKind::Marker, 0, "{}"),
            Err(EventError::UnknownSession(_))
        ));
        s.create_session(id).unwrap();
        assert!(matches!(
            s.append(id, EventKind::Marker, 0, "{text"),
            Err(EventError::MalformedPayload(_))
        ));
        assert_eq!(s.len(id).unwrap(), 0);
    }

    #[test]
    fn reopen_restores_log() {
        let tmp = tempfile::tempdir().unwrap();
        let id = Uuid::new_v4();
        {
            let s = store(tmp.path());
            s.create_session(id).unwrap();
            for i in 0..5 {
                s.append(id, EventKind::Marker, i, r#"{"text":"x"}"#)
                    .unwrap();
            }
        }
        let s = store(tmp.path());
        assert_eq!(s.len(id).unwrap(), 5);
        assert_eq!(s.append(id, EventKind::Marker, 9, "{}").unwrap().seq, 6);
    }

    #[test]
    fn concurrent_appends_are_gapless() {
        let tmp = tempfile::tempdir().unwrap();
        let s = Arc::new(store(tmp.path()));
        let id = Uuid::new_v4();
        s.create_session(id).unwrap();
        let handles: Vec<_> = (0..8)
            .map(|t| {
                let s = s.clone();
                std::thread::spawn(move || {
                    (0..125)
                        .map(|i| {
                            s.append(id, EventKind::Marker, i, &format!("{{\"t\":{t}}}"))
                                .unwrap()
                                .seq
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        let mut seqs: Vec<u64> = handles
            .into_iter()
            .flat_map(|h| h.join().unwrap())
            .collect();
        seqs.sort_unstable();
        assert_eq!(seqs, (1..=1000).collect::<Vec<_>>());
    }
}
