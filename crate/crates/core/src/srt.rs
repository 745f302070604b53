//! SubRip sidecar generation and parsing.
//!
//! Each event becomes one cue. Cue timing is derived from frame indices:
//! a cue starts at its event's frame and ends at the earliest of the next
//! event's start, one second later, or the end of the session.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::event::{EventKind, EventRecord};

/// Longest representable session; `HH` stays two digits.
pub const MAX_HOURS: u64 = 99;
/// Upper bound on how long a single cue stays on screen.
pub const MAX_CUE_MILLIS: u64 = 1000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SrtError {
    #[error("frame {frame_index} at {fps} fps is beyond {MAX_HOURS} hours")]
    OutOfRange { frame_index: u64, fps: u8 },
    #[error("fps must be at least 1")]
    ZeroFps,
    #[error("events not sorted by (frame_index, seq) at position {position}")]
    UnsortedEvents { position: usize },
    #[error("event at frame {frame_index} lies beyond frame_count {frame_count}")]
    EventBeyondEnd { frame_index: u64, frame_count: u64 },
    #[error("malformed SRT at line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Milliseconds from session start to the start of `frame_index`, floored.
pub fn frame_millis(frame_index: u64, fps: u8) -> Result<u64, SrtError> {
    if fps == 0 {
        return Err(SrtError::ZeroFps);
    }
    if frame_index >= MAX_HOURS * 3600 * fps as u64 {
        return Err(SrtError::OutOfRange { frame_index, fps });
    }
    Ok(frame_index * 1000 / fps as u64)
}

/// Inverse of [`frame_millis`]: the unique frame whose start floors to `millis`.
/// Exact for any fps up to 1000.
pub fn millis_to_frame(millis: u64, fps: u8) -> u64 {
    (millis * fps as u64).div_ceil(1000)
}

pub fn format_millis(millis: u64) -> String {
    let h = millis / 3_600_000;
    let m = millis / 60_000 % 60;
    let s = millis / 1000 % 60;
    let ms = millis % 1000;
    format!("{h:02}:{m:02}:{s:02},{ms:03}")
}

/// `HH:MM:SS,mmm` for the start of `frame_index`.
pub fn srt_timestamp(frame_index: u64, fps: u8) -> Result<String, SrtError> {
    frame_millis(frame_index, fps).map(format_millis)
}

fn cue_body(event: &EventRecord) -> String {
    let payload = if event.payload.contains(['\n', '\r']) {
        match serde_json::from_str::<serde_json::Value>(&event.payload) {
            Ok(v) => v.to_string(),
            Err(_) => event.payload.replace(['\n', '\r'], " "),
        }
    } else {
        event.payload.clone()
    };
    format!("{} {}", event.kind, payload)
}

/// Renders the SRT sidecar for a session's events.
pub fn build_srt(events: &[EventRecord], fps: u8, frame_count: u64) -> Result<String, SrtError> {
    for (i, pair) in events.windows(2).enumerate() {
        if (pair[0].frame_index, pair[0].seq) > (pair[1].frame_index, pair[1].seq) {
            return Err(SrtError::UnsortedEvents { position: i + 1 });
        }
    }
    if let Some(last) = events.last() {
        if last.frame_index > frame_count {
            return Err(SrtError::EventBeyondEnd {
                frame_index: last.frame_index,
                frame_count,
            });
        }
    }
    if events.is_empty() {
        return Ok(String::new());
    }
    let session_end = frame_millis(frame_count, fps)?;
    let starts = events
        .iter()
        .map(|e| frame_millis(e.frame_index, fps))
        .collect::<Result<Vec<_>, _>>()?;

    let mut out = String::new();
    for (i, event) in events.iter().enumerate() {
        let start = starts[i];
        let mut end = (start + MAX_CUE_MILLIS).min(session_end);
        if let Some(&next) = starts.get(i + 1) {
            end = end.min(next);
        }
        writeln!(out, "{}", i + 1).unwrap();
        writeln!(out, "{} --> {}", format_millis(start), format_millis(end)).unwrap();
        writeln!(out, "{}", cue_body(event)).unwrap();
        out.push('\n');
    }
    Ok(out)
}

/// One parsed cue. `kind` and `payload` split the body at its first space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Cue {
    pub index: u64,
    pub start_millis: u64,
    pub end_millis: u64,
    pub kind: Option<EventKind>,
    pub payload: String,
}

impl Cue {
    pub fn body(&self) -> String {
        match self.kind {
            Some(kind) => format!("{kind} {}", self.payload),
            None => self.payload.clone(),
        }
    }

    /// Whether the cue is showing at `millis` (half-open interval).
    pub fn covers(&self, millis: u64) -> bool {
        self.start_millis <= millis && millis < self.end_millis
    }
}

fn parse_timestamp(s: &str, line: usize) -> Result<u64, SrtError> {
    let bad = || SrtError::Parse {
        line,
        reason: format!("bad timestamp `{s}`"),
    };
    let (hms, ms) = s.split_once(',').ok_or_else(bad)?;
    let mut parts = hms.split(':');
    let mut next =
        || -> Result<u64, SrtError> { parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad) };
    let (h, m, sec) = (next()?, next()?, next()?);
    let ms: u64 = ms.parse().map_err(|_| bad())?;
    if m >= 60 || sec >= 60 || ms >= 1000 || ms_digits(s) != 3 {
        return Err(bad());
    }
    Ok(((h * 60 + m) * 60 + sec) * 1000 + ms)
}

fn ms_digits(s: &str) -> usize {
    s.rsplit(',').next().map_or(0, str::len)
}

/// Parses SRT text produced by [`build_srt`] (or any single-line-body SubRip).
pub fn parse_srt(text: &str) -> Result<Vec<Cue>, SrtError> {
    let mut cues = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    loop {
        while matches!(lines.peek(), Some((_, l)) if l.trim().is_empty()) {
            lines.next();
        }
        let Some((n, index_line)) = lines.next() else {
            break;
        };
        let index = index_line
            .trim()
            .parse::<u64>()
            .map_err(|_| SrtError::Parse {
                line: n + 1,
                reason: format!("expected cue number, found `{index_line}`"),
            })?;
        let (n, timing) = lines.next().ok_or(SrtError::Parse {
            line: n + 2,
            reason: "missing timing line".into(),
        })?;
        let (start, end) = timing.split_once(" --> ").ok_or_else(|| SrtError::Parse {
            line: n + 1,
            reason: format!("expected `start --> end`, found `{timing}`"),
        })?;
        let start_millis = parse_timestamp(start.trim(), n + 1)?;
        let end_millis = parse_timestamp(end.trim(), n + 1)?;
        let mut body = Vec::new();
        while let Some((_, l)) = lines.peek() {
            if l.trim().is_empty() {
                break;
            }
            body.push(*l);
            lines.next();
        }
        let body = body.join("\n");
        let (kind, payload) = match body.split_once(' ') {
            Some((k, rest)) => match k.parse::<EventKind>() {
                Ok(kind) => (Some(kind), rest.to_string()),
                Err(_) => (None, body.clone()),
            },
            None => (None, body.clone()),
        };
        cues.push(Cue {
            index,
            start_millis,
            end_millis,
            kind,
            payload,
        });
    }
    Ok(cues)
}
