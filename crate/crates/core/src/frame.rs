//! EXFR frame records.
//!
//! A record is a fixed 48-byte little-endian header followed by the pixel
//! payload:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "EXFR"
//!      4     1  version (0x01)
//!      5    16  session_id
//!     21     2  device_id
//!     23     8  frame_index
//!     31     8  capture_ts_micros
//!     39     2  width
//!     41     2  height
//!     43     1  encoding (0 = raw RGB24, 1 = RLE RGB24)
//!     44     4  payload_len
//!     48     n  payload
//! ```
//!
//! RLE payloads are a sequence of `(count, byte)` pairs with `count >= 1`.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use crate::resolution::Resolution;

pub const FRAME_MAGIC: [u8; 4] = *b"EXFR";
pub const FRAME_VERSION: u8 = 0x01;
pub const FRAME_HEADER_LEN: usize = 48;

/// Header field boundaries, used to name the first truncated field.
const FIELDS: [(&str, usize); 10] = [
    ("magic", 4),
    ("version", 5),
    ("session_id", 21),
    ("device_id", 23),
    ("frame_index", 31),
    ("capture_ts_micros", 39),
    ("width", 41),
    ("height", 43),
    ("encoding", 44),
    ("payload_len", 48),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Encoding {
    RawRgb24 = 0,
    RleRgb24 = 1,
}

impl Encoding {
    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Encoding::RawRgb24),
            1 => Some(Encoding::RleRgb24),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FrameError {
    #[error("bad magic {found:?} (expected \"EXFR\")")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported version {found}")]
    BadVersion { found: u8 },
    #[error("record truncated in field `{field}`: need {needed} bytes, have {available}")]
    TruncatedRecord {
        field: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("field `{field}` inconsistent with payload: expected {expected}, got {actual}")]
    PayloadMismatch {
        field: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("unknown encoding byte {found}")]
    UnknownEncoding { found: u8 },
    #[error("{width}x{height} is not a configured resolution preset")]
    UnknownResolution { width: u16, height: u16 },
    #[error("{extra} trailing bytes after record")]
    TrailingBytes { extra: usize },
}

/// One captured frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub session_id: Uuid,
    pub device_id: u16,
    pub frame_index: u64,
    pub capture_ts_micros: u64,
    pub width: u16,
    pub height: u16,
    pub encoding: Encoding,
    pub payload: Vec<u8>,
}

/// The fixed-size part of a record, decodable before the payload arrives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub session_id: Uuid,
    pub device_id: u16,
    pub frame_index: u64,
    pub capture_ts_micros: u64,
    pub width: u16,
    pub height: u16,
    pub encoding: Encoding,
    pub payload_len: u32,
}

impl FrameHeader {
    pub fn parse(bytes: &[u8]) -> Result<Self, FrameError> {
        if bytes.len() >= 4 && bytes[..4] != FRAME_MAGIC {
            let mut found = [0u8; 4];
            found.copy_from_slice(&bytes[..4]);
            return Err(FrameError::BadMagic { found });
        }
        if let Some(&(field, needed)) = FIELDS.iter().find(|(_, end)| *end > bytes.len()) {
            // Magic may be a partial prefix; still report it wrong if it is.
            if field == "magic" && !FRAME_MAGIC.starts_with(bytes) {
                let mut found = [0u8; 4];
                found[..bytes.len()].copy_from_slice(bytes);
                return Err(FrameError::BadMagic { found });
            }
            if needed > 5 && bytes[4] != FRAME_VERSION {
                return Err(FrameError::BadVersion { found: bytes[4] });
            }
            return Err(FrameError::TruncatedRecord {
                field,
                needed,
                available: bytes.len(),
            });
        }
        if bytes[4] != FRAME_VERSION {
            return Err(FrameError::BadVersion { found: bytes[4] });
        }
        let session_id = Uuid::from_bytes(bytes[5..21].try_into().expect("16 bytes"));
        let device_id = u16::from_le_bytes([bytes[21], bytes[22]]);
        let frame_index = u64::from_le_bytes(bytes[23..31].try_into().expect("8 bytes"));
        let capture_ts_micros = u64::from_le_bytes(bytes[31..39].try_into().expect("8 bytes"));
        let width = u16::from_le_bytes([bytes[39], bytes[40]]);
        let height = u16::from_le_bytes([bytes[41], bytes[42]]);
        let encoding = Encoding::from_byte(bytes[43])
            .ok_or(FrameError::UnknownEncoding { found: bytes[43] })?;
        let payload_len = u32::from_le_bytes(bytes[44..48].try_into().expect("4 bytes"));
        if Resolution::from_dims(width, height).is_none() {
            return Err(FrameError::UnknownResolution { width, height });
        }
        Ok(FrameHeader {
            session_id,
            device_id,
            frame_index,
            capture_ts_micros,
            width,
            height,
            encoding,
            payload_len,
        })
    }

    pub fn record_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload_len as usize
    }
}

impl FrameRecord {
    /// Builds a raw RGB24 frame.
    pub fn raw(
        session_id: Uuid,
        device_id: u16,
        frame_index: u64,
        capture_ts_micros: u64,
        resolution: Resolution,
        pixels: Vec<u8>,
    ) -> Self {
        debug_assert_eq!(pixels.len(), resolution.pixel_bytes());
        FrameRecord {
            session_id,
            device_id,
            frame_index,
            capture_ts_micros,
            width: resolution.width(),
            height: resolution.height(),
            encoding: Encoding::RawRgb24,
            payload: pixels,
        }
    }

    pub fn resolution(&self) -> Option<Resolution> {
        Resolution::from_dims(self.width, self.height)
    }

    pub fn pixel_len(&self) -> usize {
        self.width as usize * self.height as usize * 3
    }

    /// Decoded RGB24 pixels, borrowed for raw frames.
    pub fn pixels(&self) -> Result<Cow<'_, [u8]>, FrameError> {
        match self.encoding {
            Encoding::RawRgb24 => {
                if self.payload.len() != self.pixel_len() {
                    return Err(FrameError::PayloadMismatch {
                        field: "payload_len",
                        expected: self.pixel_len(),
                        actual: self.payload.len(),
                    });
                }
                Ok(Cow::Borrowed(&self.payload))
            }
            Encoding::RleRgb24 => rle_decode(&self.payload, self.pixel_len()).map(Cow::Owned),
        }
    }

    /// Returns a copy of this frame with `pixels` stored under `encoding`.
    pub fn with_pixels(&self, pixels: &[u8], encoding: Encoding) -> Self {
        let payload = match encoding {
            Encoding::RawRgb24 => pixels.to_vec(),
            Encoding::RleRgb24 => rle_encode(pixels),
        };
        FrameRecord {
            session_id: self.session_id,
            device_id: self.device_id,
            frame_index: self.frame_index,
            capture_ts_micros: self.capture_ts_micros,
            width: self.width,
            height: self.height,
            encoding,
            payload,
        }
    }

    /// Re-encodes the payload, leaving every header field but `encoding` intact.
    pub fn reencode(&self, encoding: Encoding) -> Result<Self, FrameError> {
        if encoding == self.encoding {
            return Ok(self.clone());
        }
        let pixels = self.pixels()?;
        Ok(self.with_pixels(&pixels, encoding))
    }

    pub fn encoded_len(&self) -> usize {
        FRAME_HEADER_LEN + self.payload.len()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&FRAME_MAGIC);
        out.push(FRAME_VERSION);
        out.extend_from_slice(self.session_id.as_bytes());
        out.extend_from_slice(&self.device_id.to_le_bytes());
        out.extend_from_slice(&self.frame_index.to_le_bytes());
        out.extend_from_slice(&self.capture_ts_micros.to_le_bytes());
        out.extend_from_slice(&self.width.to_le_bytes());
        out.extend_from_slice(&self.height.to_le_bytes());
        out.push(self.encoding as u8);
        out.extend_from_slice(&(self.payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.payload);
    }

    /// Decodes exactly one record spanning all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, FrameError> {
        let (frame, used) = Self::decode_prefix(bytes)?;
        if used != bytes.len() {
            return Err(FrameError::TrailingBytes {
                extra: bytes.len() - used,
            });
        }
        Ok(frame)
    }

    /// Decodes the record at the start of `bytes`, returning it and its length.
    pub fn decode_prefix(bytes: &[u8]) -> Result<(Self, usize), FrameError> {
        let header = FrameHeader::parse(bytes)?;
        let end = header.record_len();
        if bytes.len() < end {
            return Err(FrameError::TruncatedRecord {
                field: "payload",
                needed: end,
                available: bytes.len(),
            });
        }
        let frame = Self::from_parts(header, bytes[FRAME_HEADER_LEN..end].to_vec())?;
        Ok((frame, end))
    }

    /// Assembles a record from a parsed header and its payload, validating
    /// the payload against the frame dimensions.
    pub fn from_parts(header: FrameHeader, payload: Vec<u8>) -> Result<Self, FrameError> {
        if payload.len() != header.payload_len as usize {
            return Err(FrameError::PayloadMismatch {
                field: "payload_len",
                expected: header.payload_len as usize,
                actual: payload.len(),
            });
        }
        let expected = header.width as usize * header.height as usize * 3;
        match header.encoding {
            Encoding::RawRgb24 => {
                if payload.len() != expected {
                    return Err(FrameError::PayloadMismatch {
                        field: "payload_len",
                        expected,
                        actual: payload.len(),
                    });
                }
            }
            Encoding::RleRgb24 => {
                let actual = rle_expanded_len(&payload)?;
                if actual != expected {
                    return Err(FrameError::PayloadMismatch {
                        field: "payload",
                        expected,
                        actual,
                    });
                }
            }
        }
        Ok(FrameRecord {
            session_id: header.session_id,
            device_id: header.device_id,
            frame_index: header.frame_index,
            capture_ts_micros: header.capture_ts_micros,
            width: header.width,
            height: header.height,
            encoding: header.encoding,
            payload,
        })
    }
}

pub fn rle_encode(bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len() / 64 + 2);
    let mut iter = bytes.iter().copied();
    let Some(mut current) = iter.next() else {
        return out;
    };
    let mut count: u8 = 1;
    for b in iter {
        if b == current && count < u8::MAX {
            count += 1;
        } else {
            out.push(count);
            out.push(current);
            current = b;
            count = 1;
        }
    }
    out.push(count);
    out.push(current);
    out
}

fn rle_expanded_len(payload: &[u8]) -> Result<usize, FrameError> {
    if payload.len() % 2 != 0 {
        return Err(FrameError::PayloadMismatch {
            field: "payload",
            expected: payload.len() + 1,
            actual: payload.len(),
        });
    }
    let mut total = 0usize;
    for pair in payload.chunks_exact(2) {
        if pair[0] == 0 {
            return Err(FrameError::PayloadMismatch {
                field: "payload",
                expected: 1,
                actual: 0,
            });
        }
        total += pair[0] as usize;
    }
    Ok(total)
}

/// Expands an RLE payload, failing unless it yields exactly `expected` bytes.
pub fn rle_decode(payload: &[u8], expected: usize) -> Result<Vec<u8>, FrameError> {
    let actual = rle_expanded_len(payload)?;
    if actual != expected {
        return Err(FrameError::PayloadMismatch {
            field: "payload",
            expected,
            actual,
        });
    }
    let mut out = Vec::with_capacity(expected);
    for pair in payload.chunks_exact(2) {
        out.resize(out.len() + pair[0] as usize, pair[1]);
    }
    Ok(out)
}
