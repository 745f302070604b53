//! Stub marker detector and box annotation.

use serde::{Deserialize, Serialize};

use crate::frame::{FrameError, FrameRecord};
use crate::render::MARKER_SIZE;

pub const MARKER_LABEL: &str = "marker";
const OUTLINE: [u8; 3] = [255, 0, 0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    pub label: String,
    pub score: f64,
}

impl Detection {
    pub fn fits(&self, width: u16, height: u16) -> bool {
        self.w > 0
            && self.h > 0
            && self.x as u64 + self.w as u64 <= width as u64
            && self.y as u64 + self.h as u64 <= height as u64
            && (0.0..=1.0).contains(&self.score)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnnotateError {
    #[error("detection {index} does not fit inside the frame")]
    BoxOutOfBounds { index: usize },
    #[error(transparent)]
    Frame(#[from] FrameError),
}

fn is_white(px: &[u8], i: usize) -> bool {
    px[i * 3] == 255 && px[i * 3 + 1] == 255 && px[i * 3 + 2] == 255
}

/// Finds the rendered 32×32 white marker in decoded pixels. Row 0 holds the
/// index strip and is never examined; a marker touching row 0 shows 31 rows
/// from row 1 and is reported at `y = 0`.
pub fn detect_in_pixels(px: &[u8], width: u16, height: u16) -> Vec<Detection> {
    let (w, h) = (width as usize, height as usize);
    let (mut min_x, mut min_y, mut max_x, mut max_y) = (usize::MAX, usize::MAX, 0, 0);
    let mut count = 0usize;
    for row in 1..h {
        for col in 0..w {
            if is_white(px, row * w + col) {
                min_x = min_x.min(col);
                max_x = max_x.max(col);
                min_y = min_y.min(row);
                max_y = max_y.max(row);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Vec::new();
    }
    let (bw, bh) = (max_x - min_x + 1, max_y - min_y + 1);
    let size = MARKER_SIZE as usize;
    let top = match (bw, bh, min_y) {
        (bw, bh, _) if bw == size && bh == size => min_y,
        (bw, bh, 1) if bw == size && bh == size - 1 => 0,
        _ => return Vec::new(),
    };
    if count != bw * bh {
        return Vec::new();
    }
    vec![Detection {
        x: min_x as u32,
        y: top as u32,
        w: size as u32,
        h: size as u32,
        label: MARKER_LABEL.to_string(),
        score: 1.0,
    }]
}

pub fn detect_marker(frame: &FrameRecord) -> Vec<Detection> {
    match frame.pixels() {
        Ok(px) => detect_in_pixels(&px, frame.width, frame.height),
        Err(_) => Vec::new(),
    }
}

/// Draws a one-pixel outline just outside each box into RGB24 pixels,
/// clipped at the frame edges.
pub fn draw_outlines(
    px: &mut [u8],
    width: u16,
    height: u16,
    detections: &[Detection],
) -> Result<(), AnnotateError> {
    for (index, d) in detections.iter().enumerate() {
        if !d.fits(width, height) {
            return Err(AnnotateError::BoxOutOfBounds { index });
        }
    }
    let (w, h) = (width as i64, height as i64);
    let mut paint = |col: i64, row: i64| {
        if (0..w).contains(&col) && (0..h).contains(&row) {
            let i = ((row * w + col) * 3) as usize;
            px[i..i + 3].copy_from_slice(&OUTLINE);
        }
    };
    for d in detections {
        let (left, top) = (d.x as i64 - 1, d.y as i64 - 1);
        let (right, bottom) = (d.x as i64 + d.w as i64, d.y as i64 + d.h as i64);
        for col in left..=right {
            paint(col, top);
            paint(col, bottom);
        }
        for row in d.y as i64..bottom {
            paint(left, row);
            paint(right, row);
        }
    }
    Ok(())
}

/// Returns a copy of `frame` with detection outlines drawn, in the frame's
/// own encoding. Header fields are unchanged.
pub fn annotate(
    frame: &FrameRecord,
    detections: &[Detection],
) -> Result<FrameRecord, AnnotateError> {
    if detections.is_empty() {
        return Ok(frame.clone());
    }
    let mut px = frame.pixels()?.into_owned();
    draw_outlines(&mut px, frame.width, frame.height, detections)?;
    Ok(frame.with_pixels(&px, frame.encoding))
}
