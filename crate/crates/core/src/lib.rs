//! Core model of the remote capture platform: domain types, the EXFR/EXSG/
//! EXHS wire formats, SRT sidecars, session containers, the car model and
//! the synthetic camera.
//!
//! Everything here is pure and free of I/O except the container helpers,
//! which read and write a session directory.

pub mod command;
pub mod container;
pub mod detect;
pub mod event;
pub mod frame;
pub mod header;
pub mod kinematics;
pub mod render;
pub mod resolution;
pub mod script;
pub mod segment;
pub mod session;
pub mod srt;
pub mod throttle;

pub use command::{AppliedCommand, CommandKind, ControlCommand};
pub use container::{
    replay, verify_container, ContainerError, ContainerLayout, VerificationReport,
};
pub use detect::{annotate, detect_marker, Detection};
pub use event::{EventKind, EventRecord};
pub use frame::{Encoding, FrameError, FrameRecord};
pub use header::SessionHeader;
pub use kinematics::{step_kinematics, PoseState, Scalar, Simulator, VehicleParams};
pub use render::{extract_frame_index, marker_origin, render_frame, render_pixels, FrameStamp};
pub use resolution::Resolution;
pub use session::{
    IngestStats, SceneConfig, SceneLease, SegmentEntry, SessionManifest, SessionState,
    SessionStatus, SessionSummary,
};
pub use srt::{build_srt, srt_timestamp};

/// Double-precision pose, the agent's native state.
pub type Pose = PoseState<f64>;
/// Single-precision pose.
pub type PoseF32 = PoseState<f32>;
pub type Sim = Simulator<f64>;
pub type Params = VehicleParams<f64>;
