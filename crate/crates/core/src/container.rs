//! Session containers: `session-<uuid>/` holding `manifest.json`,
//! `segments/<first-frame>.seg` and `session.srt`. Verification and replay
//! work from the directory alone.

use std::collections::{BTreeMap, VecDeque};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::command::CommandKind;
use crate::event::EventKind;
use crate::frame::FrameRecord;
use crate::kinematics::{Simulator, VehicleParams};
use crate::render::{extract_frame_index, render_pixels};
use crate::segment::{split_segment, SegmentError, SegmentRecords};
use crate::session::{SegmentEntry, SessionManifest};
use crate::srt::{frame_millis, millis_to_frame, parse_srt, Cue, SrtError};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SRT_FILE: &str = "session.srt";
pub const SEGMENTS_DIR: &str = "segments";

pub fn container_dir_name(session_id: Uuid) -> String {
    format!("session-{session_id}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContainerLayout {
    root: PathBuf,
}

impl ContainerLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        ContainerLayout { root: root.into() }
    }

    pub fn for_session(base: &Path, session_id: Uuid) -> Self {
        Self::new(base.join(container_dir_name(session_id)))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.root.join(MANIFEST_FILE)
    }

    pub fn srt_path(&self) -> PathBuf {
        self.root.join(SRT_FILE)
    }

    pub fn segments_dir(&self) -> PathBuf {
        self.root.join(SEGMENTS_DIR)
    }

    pub fn segment_path(&self, file_name: &str) -> PathBuf {
        self.segments_dir().join(file_name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("{0} is not a session container")]
    NotAContainer(PathBuf),
    #[error("manifest unreadable: {0}")]
    ManifestParseError(String),
    #[error("frame {requested} is past the last delivered frame ({last:?})")]
    FrameOutOfRange { requested: u64, last: Option<u64> },
    #[error("segment {file}: {source}")]
    Segment {
        file: String,
        #[source]
        source: SegmentError,
    },
    #[error("segment {file}: checksum {actual:#010x} does not match manifest {expected:#010x}")]
    ChecksumMismatch {
        file: String,
        expected: u32,
        actual: u32,
    },
    #[error("segment {0} is missing")]
    MissingSegment(String),
    #[error(transparent)]
    Srt(#[from] SrtError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_manifest(layout: &ContainerLayout, manifest: &SessionManifest) -> io::Result<()> {
    let json = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(layout.manifest_path(), json + "\n")
}

pub fn read_manifest(layout: &ContainerLayout) -> Result<SessionManifest, ContainerError> {
    let text = match fs::read_to_string(layout.manifest_path()) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ContainerError::NotAContainer(layout.root().to_path_buf()))
        }
        Err(e) => return Err(e.into()),
    };
    serde_json::from_str(&text).map_err(|e| ContainerError::ManifestParseError(e.to_string()))
}

/// Reads a segment file and checks its trailer and the manifest's checksum.
pub fn read_segment_checked(
    layout: &ContainerLayout,
    entry: &SegmentEntry,
) -> Result<Vec<u8>, ContainerError> {
    let bytes = match fs::read(layout.segment_path(&entry.file_name)) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => {
            return Err(ContainerError::MissingSegment(entry.file_name.clone()))
        }
        Err(e) => return Err(e.into()),
    };
    let (stored, _) = split_segment(&bytes).map_err(|source| match source {
        SegmentError::ChecksumMismatch { computed, .. } => ContainerError::ChecksumMismatch {
            file: entry.file_name.clone(),
            expected: entry.crc32,
            actual: computed,
        },
        source => ContainerError::Segment {
            file: entry.file_name.clone(),
            source,
        },
    })?;
    if stored != entry.crc32 {
        return Err(ContainerError::ChecksumMismatch {
            file: entry.file_name.clone(),
            expected: entry.crc32,
            actual: stored,
        });
    }
    Ok(bytes)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub first_offending_frame: Option<u64>,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &str, detail: impl Into<String>) -> Self {
        CheckResult {
            name: name.into(),
            passed: true,
            first_offending_frame: None,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub session_id: Uuid,
    pub frames_checked: u64,
    pub checks: Vec<CheckResult>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }
}

pub const CHECK_SEGMENTS: &str = "segments";
pub const CHECK_INDEX_STRIP: &str = "index_strip";
pub const CHECK_COMMAND_FRAMES: &str = "command_frames";
pub const CHECK_RESIMULATION: &str = "resimulation";

/// Tracks the first failure of one check.
struct Tally {
    name: &'static str,
    failure: Option<(Option<u64>, String)>,
}

impl Tally {
    fn new(name: &'static str) -> Self {
        Tally {
            name,
            failure: None,
        }
    }

    fn fail(&mut self, frame: Option<u64>, detail: impl Into<String>) {
        if self.failure.is_none() {
            self.failure = Some((frame, detail.into()));
        }
    }

    fn finish(self, ok_detail: impl Into<String>) -> CheckResult {
        match self.failure {
            None => CheckResult::pass(self.name, ok_detail),
            Some((frame, detail)) => CheckResult {
                name: self.name.into(),
                passed: false,
                first_offending_frame: frame,
                detail,
            },
        }
    }
}

/// Vehicle parameters announced in the session's `started` lifecycle cue.
pub fn vehicle_params_from_cues(cues: &[Cue]) -> VehicleParams<f64> {
    let mut params = VehicleParams::default();
    let started = cues
        .iter()
        .filter(|c| c.kind == Some(EventKind::Lifecycle))
        .find_map(|c| {
            let v: serde_json::Value = serde_json::from_str(&c.payload).ok()?;
            (v.get("event")?.as_str()? == "started").then_some(v)
        });
    if let Some(v) = started {
        if let Some(w) = v.get("wheelbase").and_then(|w| w.as_f64()) {
            params.wheelbase = w;
        }
        if let Some(s) = v.get("max_speed").and_then(|s| s.as_f64()) {
            params.max_speed = s;
        }
    }
    params
}

/// COMMAND cues as `(applied_frame_index, command)` in cue order.
pub fn commands_from_cues(cues: &[Cue], fps: u8) -> Vec<(u64, Result<CommandKind, String>)> {
    cues.iter()
        .filter(|c| c.kind == Some(EventKind::Command))
        .map(|c| {
            let frame = millis_to_frame(c.start_millis, fps);
            let cmd = serde_json::from_str::<CommandKind>(&c.payload).map_err(|e| e.to_string());
            (frame, cmd)
        })
        .collect()
}

fn read_cues(layout: &ContainerLayout) -> Result<Vec<Cue>, String> {
    match fs::read_to_string(layout.srt_path()) {
        Ok(text) => parse_srt(&text).map_err(|e| e.to_string()),
        Err(e) => Err(format!("{SRT_FILE}: {e}")),
    }
}

/// End-to-end synchronization check of a packed container:
/// segments decode with matching checksums, every frame's pixel index strip
/// equals its header index, every command lands inside the session, and for
/// deterministic sessions re-simulating the logged commands reproduces every
/// delivered frame's pixels.
pub fn verify_container(path: &Path) -> Result<VerificationReport, ContainerError> {
    let layout = ContainerLayout::new(path);
    if !path.is_dir() {
        return Err(ContainerError::NotAContainer(path.to_path_buf()));
    }
    let manifest = read_manifest(&layout)?;

    let mut segments = Tally::new(CHECK_SEGMENTS);
    let mut strip = Tally::new(CHECK_INDEX_STRIP);
    let mut commands = Tally::new(CHECK_COMMAND_FRAMES);
    let mut resim = Tally::new(CHECK_RESIMULATION);

    if let Err(e) = manifest.validate() {
        segments.fail(None, e.to_string());
    }

    let cues = read_cues(&layout);
    let mut schedule: BTreeMap<u64, Vec<CommandKind>> = BTreeMap::new();
    match &cues {
        Ok(cues) => {
            for (frame, cmd) in commands_from_cues(cues, manifest.fps) {
                if frame >= manifest.frame_count {
                    commands.fail(
                        Some(frame),
                        format!(
                            "command applied at frame {frame}, session has {} frames",
                            manifest.frame_count
                        ),
                    );
                }
                match cmd {
                    Ok(cmd) => schedule.entry(frame).or_default().push(cmd),
                    Err(e) => {
                        commands.fail(Some(frame), format!("unparseable command payload: {e}"))
                    }
                }
            }
        }
        Err(e) => {
            commands.fail(None, e.clone());
            resim.fail(None, e.clone());
        }
    }

    let params = cues
        .as_deref()
        .map(vehicle_params_from_cues)
        .unwrap_or_default();
    let mut sim = Simulator::<f64>::new(params, manifest.fps);
    let mut next_sim_frame = 0u64;
    let mut previous: Option<u64> = None;
    let mut frames_checked = 0u64;

    for entry in &manifest.segments {
        let bytes = match read_segment_checked(&layout, entry) {
            Ok(b) => b,
            Err(e) => {
                segments.fail(Some(entry.first_frame_index), e.to_string());
                continue;
            }
        };
        let body = &bytes[crate::segment::SEGMENT_HEADER_LEN..bytes.len() - 4];
        let mut count = 0u64;
        for record in SegmentRecords::new(body) {
            let frame = match record {
                Ok(f) => f,
                Err(e) => {
                    segments.fail(
                        Some(entry.first_frame_index + count),
                        format!("{}: {e}", entry.file_name),
                    );
                    break;
                }
            };
            let idx = frame.frame_index;
            if count == 0 && idx != entry.first_frame_index {
                segments.fail(
                    Some(idx),
                    format!("{} starts at frame {idx}", entry.file_name),
                );
            }
            if previous.is_some_and(|p| idx <= p) {
                segments.fail(
                    Some(idx),
                    format!("frame {idx} does not follow {}", previous.unwrap()),
                );
            }
            if frame.session_id != manifest.session_id {
                segments.fail(Some(idx), "frame belongs to another session");
            }
            previous = Some(idx);
            count += 1;
            frames_checked += 1;

            let Ok(pixels) = frame.pixels() else {
                strip.fail(Some(idx), "payload does not decode");
                continue;
            };
            let embedded = crate::render::extract_index_from_pixels(&pixels);
            if embedded != idx {
                strip.fail(
                    Some(idx),
                    format!("pixels carry index {embedded}, header says {idx}"),
                );
            }

            if manifest.deterministic_clock && resim.failure.is_none() {
                let Some(resolution) = frame.resolution() else {
                    resim.fail(Some(idx), "unknown resolution");
                    continue;
                };
                while next_sim_frame <= idx {
                    let cmds = schedule.get(&next_sim_frame).cloned().unwrap_or_default();
                    sim.tick(cmds);
                    next_sim_frame += 1;
                }
                if render_pixels(sim.pose(), idx, resolution) != *pixels {
                    resim.fail(
                        Some(idx),
                        "re-simulated frame differs from delivered pixels",
                    );
                }
            }
        }
        if count != entry.frame_count {
            segments.fail(
                Some(entry.first_frame_index),
                format!(
                    "{} holds {count} frames, manifest says {}",
                    entry.file_name, entry.frame_count
                ),
            );
        }
    }

    let resim_ok = if manifest.deterministic_clock {
        format!("{frames_checked} frames reproduced")
    } else {
        "skipped: session does not use the deterministic clock".to_string()
    };
    Ok(VerificationReport {
        session_id: manifest.session_id,
        frames_checked,
        checks: vec![
            segments.finish(format!("{} segments intact", manifest.segments.len())),
            strip.finish(format!("{frames_checked} index strips match")),
            commands.finish(format!(
                "{} commands inside the session",
                schedule.values().map(Vec::len).sum::<usize>()
            )),
            resim.finish(resim_ok),
        ],
    })
}

/// A replayed frame with the cues showing at its timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayItem {
    pub frame: FrameRecord,
    pub cues: Vec<Cue>,
}

/// Ordered, lazily loaded feed of delivered frames.
#[derive(Debug)]
pub struct Replay {
    layout: ContainerLayout,
    manifest: SessionManifest,
    cues: Vec<Cue>,
    next_segment: usize,
    buffered: VecDeque<FrameRecord>,
    from_frame: u64,
}

impl Replay {
    pub fn manifest(&self) -> &SessionManifest {
        &self.manifest
    }

    pub fn cues(&self) -> &[Cue] {
        &self.cues
    }

    fn load_segment(&mut self, idx: usize) -> Result<Vec<FrameRecord>, ContainerError> {
        let entry = &self.manifest.segments[idx];
        let bytes = read_segment_checked(&self.layout, entry)?;
        crate::segment::decode_segment(&bytes).map_err(|source| ContainerError::Segment {
            file: entry.file_name.clone(),
            source,
        })
    }

    fn active_cues(&self, frame_index: u64) -> Vec<Cue> {
        let Ok(t) = frame_millis(frame_index, self.manifest.fps) else {
            return Vec::new();
        };
        self.cues.iter().filter(|c| c.covers(t)).cloned().collect()
    }
}

impl Iterator for Replay {
    type Item = Result<ReplayItem, ContainerError>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            if let Some(frame) = self.buffered.pop_front() {
                if frame.frame_index < self.from_frame {
                    continue;
                }
                let cues = self.active_cues(frame.frame_index);
                return Some(Ok(ReplayItem { frame, cues }));
            }
            if self.next_segment >= self.manifest.segments.len() {
                return None;
            }
            let idx = self.next_segment;
            self.next_segment += 1;
            // A later segment that still starts at or before from_frame makes this one skippable.
            if self
                .manifest
                .segments
                .get(idx + 1)
                .is_some_and(|next| next.first_frame_index <= self.from_frame)
            {
                continue;
            }
            match self.load_segment(idx) {
                Ok(frames) => self.buffered.extend(frames),
                Err(e) => {
                    self.next_segment = self.manifest.segments.len();
                    return Some(Err(e));
                }
            }
        }
    }
}

/// Opens a container for playback from the first delivered frame with
/// index `>= from_frame`.
pub fn replay(path: &Path, from_frame: u64) -> Result<Replay, ContainerError> {
    let layout = ContainerLayout::new(path);
    let manifest = read_manifest(&layout)?;
    let cues = match fs::read_to_string(layout.srt_path()) {
        Ok(text) => parse_srt(&text)?,
        Err(e) if e.kind() == io::ErrorKind::NotFound => Vec::new(),
        Err(e) => return Err(e.into()),
    };
    let mut replay = Replay {
        layout,
        manifest,
        cues,
        next_segment: 0,
        buffered: VecDeque::new(),
        from_frame,
    };
    let last = match replay.manifest.segments.len() {
        0 => None,
        n => replay.load_segment(n - 1)?.last().map(|f| f.frame_index),
    };
    if last.is_none_or(|l| from_frame > l) {
        return Err(ContainerError::FrameOutOfRange {
            requested: from_frame,
            last,
        });
    }
    Ok(replay)
}

/// Convenience: the frame indices delivered in a container, for callers
/// that only need the index sequence.
pub fn delivered_indices(path: &Path) -> Result<Vec<u64>, ContainerError> {
    replay(path, 0)?
        .map(|item| item.map(|i| i.frame.frame_index))
        .collect()
}

/// Reads the frame index embedded in the pixels of each delivered frame.
pub fn embedded_indices(path: &Path) -> Result<Vec<u64>, ContainerError> {
    replay(path, 0)?
        .map(|item| item.map(|i| extract_frame_index(&i.frame)))
        .collect()
}
