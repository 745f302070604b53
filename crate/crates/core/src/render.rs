//! Deterministic synthetic camera.
//!
//! Frames are mid-gray with a 32×32 white marker whose position follows
//! the car pose, and the frame index written LSB-first into the red
//! channel of row 0, pixels 0..64 (white = 1, black = 0).

use uuid::Uuid;

use crate::frame::{Encoding, FrameRecord};
use crate::kinematics::{PoseState, Scalar};
use crate::resolution::Resolution;

pub const BACKGROUND: u8 = 128;
pub const MARKER_SIZE: u16 = 32;
pub const INDEX_BITS: usize = 64;

/// Top-left pixel of the marker for a car at world position `(x, y)`.
pub fn marker_origin<T: Scalar>(x: T, y: T, resolution: Resolution) -> (u16, u16) {
    let place = |v: T, extent: u16| -> u16 {
        let scaled = v / T::lit(10.0);
        let frac = scaled - scaled.floor();
        let span = extent - MARKER_SIZE - 1;
        let pos = (frac * T::lit(span as f64)).floor();
        pos.to_u16().unwrap_or(0).min(span)
    };
    (place(x, resolution.width()), place(y, resolution.height()))
}

pub fn render_pixels<T: Scalar>(
    pose: &PoseState<T>,
    frame_index: u64,
    resolution: Resolution,
) -> Vec<u8> {
    let width = resolution.width() as usize;
    let mut px = vec![BACKGROUND; resolution.pixel_bytes()];
    let (u, v) = marker_origin(pose.x, pose.y, resolution);
    let row_bytes = MARKER_SIZE as usize * 3;
    for row in v as usize..(v + MARKER_SIZE) as usize {
        let start = (row * width + u as usize) * 3;
        px[start..start + row_bytes].fill(255);
    }
    for bit in 0..INDEX_BITS {
        let value = if frame_index >> bit & 1 == 1 { 255 } else { 0 };
        px[bit * 3..bit * 3 + 3].fill(value);
    }
    px
}

/// Identity and timing fields stamped onto rendered frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameStamp {
    pub session_id: Uuid,
    pub device_id: u16,
    pub capture_ts_micros: u64,
}

pub fn render_frame<T: Scalar>(
    pose: &PoseState<T>,
    frame_index: u64,
    resolution: Resolution,
    stamp: FrameStamp,
    encoding: Encoding,
) -> FrameRecord {
    let frame = FrameRecord::raw(
        stamp.session_id,
        stamp.device_id,
        frame_index,
        stamp.capture_ts_micros,
        resolution,
        render_pixels(pose, frame_index, resolution),
    );
    match encoding {
        Encoding::RawRgb24 => frame,
        Encoding::RleRgb24 => frame
            .reencode(Encoding::RleRgb24)
            .expect("raw frame is valid"),
    }
}

/// Capture timestamp under the deterministic clock.
pub fn deterministic_ts(start_ts_micros: u64, frame_index: u64, fps: u8) -> u64 {
    start_ts_micros + (frame_index as u128 * 1_000_000 / fps as u128) as u64
}

/// Reads the frame index strip from decoded RGB24 pixels.
pub fn extract_index_from_pixels(pixels: &[u8]) -> u64 {
    (0..INDEX_BITS)
        .filter(|&bit| pixels.get(bit * 3).is_some_and(|&r| r >= 128))
        .fold(0u64, |acc, bit| acc | 1 << bit)
}

/// Reads the index strip of a frame; undecodable frames read as 0.
pub fn extract_frame_index(frame: &FrameRecord) -> u64 {
    frame
        .pixels()
        .map(|px| extract_index_from_pixels(&px))
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose(x: f64, y: f64) -> PoseState<f64> {
        PoseState {
            x,
            y,
            ..Default::default()
        }
    }

    #[test]
    fn placement() {
        assert_eq!(marker_origin(0.0, 0.0, Resolution::P360), (0, 0));
        // floor(0.5 * 607), floor(0.5 * 327)
        assert_eq!(marker_origin(5.0, 5.0, Resolution::P360), (303, 163));
        assert_eq!(marker_origin(5.0f32, 5.0f32, Resolution::P360), (303, 163));
        // negative coordinates wrap through the non-negative fractional part
        assert_eq!(marker_origin(-5.0, -2.5, Resolution::P360), (303, 245));
        assert_eq!(marker_origin(15.0, 25.0, Resolution::P1080), (943, 523));
    }

    #[test]
    fn origin_frame() {
        let px = render_pixels(&pose(0.0, 0.0), 0, Resolution::P360);
        assert!(px[..INDEX_BITS * 3].iter().all(|&b| b == 0));
        // marker rows 1..32 at columns 0..32 are white
        let w = 640 * 3;
        assert!(px[w..w + 96].iter().all(|&b| b == 255));
        assert_eq!(px[w + 96], BACKGROUND);
        assert_eq!(px[32 * w], BACKGROUND);
        assert_eq!(extract_index_from_pixels(&px), 0);
    }

    #[test]
    fn index_strip() {
        let px = render_pixels(&pose(3.0, 3.0), 5, Resolution::P360);
        assert_eq!(px[0], 255);
        assert_eq!(px[3], 0);
        assert_eq!(px[6], 255);
        assert_eq!(extract_index_from_pixels(&px), 5);
        let px = render_pixels(&pose(0.0, 0.0), u64::MAX, Resolution::P360);
        assert_eq!(extract_index_from_pixels(&px), u64::MAX);
    }

    #[test]
    fn deterministic_render() {
        let stamp = FrameStamp {
            session_id: Uuid::nil(),
            device_id: 1,
            capture_ts_micros: 9,
        };
        let a = render_frame(
            &pose(1.3, 7.7),
            42,
            Resolution::P720,
            stamp,
            Encoding::RleRgb24,
        );
        let b = render_frame(
            &pose(1.3, 7.7),
            42,
            Resolution::P720,
            stamp,
            Encoding::RleRgb24,
        );
        assert_eq!(a.encode(), b.encode());
        assert_eq!(extract_frame_index(&a), 42);
    }

    #[test]
    fn timestamps() {
        assert_eq!(deterministic_ts(1_000, 0, 30), 1_000);
        assert_eq!(deterministic_ts(0, 1, 30), 33_333);
        assert_eq!(deterministic_ts(0, 30, 30), 1_000_000);
    }
}
