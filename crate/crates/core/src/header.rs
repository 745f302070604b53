//! The 64-byte EXHS header an agent sends before its frame stream.
//!
//! ```text
//! offset  size  field
//!      0     4  magic "EXHS"
//!      4     1  version (0x01)
//!      5    16  session_id
//!     21     2  device_id (LE)
//!     23     1  fps
//!     24     1  resolution code (0 = 360p, 1 = 720p, 2 = 1080p)
//!     25     1  flags (bit 0: deterministic clock)
//!     26     8  start_ts_micros (LE)
//!     34    30  zero padding
//! ```

use uuid::Uuid;

use crate::resolution::Resolution;
use crate::session::fps_valid;

pub const SESSION_HEADER_MAGIC: [u8; 4] = *b"EXHS";
pub const SESSION_HEADER_VERSION: u8 = 0x01;
pub const SESSION_HEADER_LEN: usize = 64;
pub const FLAG_DETERMINISTIC: u8 = 0x01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SessionHeader {
    pub session_id: Uuid,
    pub device_id: u16,
    pub fps: u8,
    pub resolution: Resolution,
    pub deterministic_clock: bool,
    pub start_ts_micros: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HeaderError {
    #[error("bad session header magic")]
    BadMagic,
    #[error("unsupported session header version {0}")]
    BadVersion(u8),
    #[error("session header truncated ({0} bytes)")]
    Truncated(usize),
    #[error("unknown resolution code {0}")]
    BadResolution(u8),
    #[error("fps {0} outside 1..=120")]
    BadFps(u8),
    #[error("non-zero padding or unknown flags")]
    BadPadding,
}

impl SessionHeader {
    pub fn encode(&self) -> [u8; SESSION_HEADER_LEN] {
        let mut out = [0u8; SESSION_HEADER_LEN];
        out[..4].copy_from_slice(&SESSION_HEADER_MAGIC);
        out[4] = SESSION_HEADER_VERSION;
        out[5..21].copy_from_slice(self.session_id.as_bytes());
        out[21..23].copy_from_slice(&self.device_id.to_le_bytes());
        out[23] = self.fps;
        out[24] = self.resolution.code();
        out[25] = if self.deterministic_clock {
            FLAG_DETERMINISTIC
        } else {
            0
        };
        out[26..34].copy_from_slice(&self.start_ts_micros.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, HeaderError> {
        if bytes.len() >= 4 && bytes[..4] != SESSION_HEADER_MAGIC {
            return Err(HeaderError::BadMagic);
        }
        if bytes.len() < SESSION_HEADER_LEN {
            return Err(HeaderError::Truncated(bytes.len()));
        }
        if bytes[4] != SESSION_HEADER_VERSION {
            return Err(HeaderError::BadVersion(bytes[4]));
        }
        let fps = bytes[23];
        if !fps_valid(fps) {
            return Err(HeaderError::BadFps(fps));
        }
        let resolution =
            Resolution::from_code(bytes[24]).ok_or(HeaderError::BadResolution(bytes[24]))?;
        if bytes[25] & !FLAG_DETERMINISTIC != 0
            || bytes[34..SESSION_HEADER_LEN].iter().any(|&b| b != 0)
        {
            return Err(HeaderError::BadPadding);
        }
        Ok(SessionHeader {
            session_id: Uuid::from_bytes(bytes[5..21].try_into().expect("16 bytes")),
            device_id: u16::from_le_bytes([bytes[21], bytes[22]]),
            fps,
            resolution,
            deterministic_clock: bytes[25] & FLAG_DETERMINISTIC != 0,
            start_ts_micros: u64::from_le_bytes(bytes[26..34].try_into().expect("8 bytes")),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn golden_bytes() {
        let h = SessionHeader {
            session_id: Uuid::from_bytes([0xAB; 16]),
            device_id: 0x0102,
            fps: 30,
            resolution: Resolution::P720,
            deterministic_clock: true,
            start_ts_micros: 0x0807_0605_0403_0201,
        };
        let b = h.encode();
        assert_eq!(&b[..5], b"EXHS\x01");
        assert_eq!(&b[21..26], &[0x02, 0x01, 30, 1, 1]);
        assert_eq!(&b[26..34], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert!(b[34..].iter().all(|&x| x == 0));
        assert_eq!(SessionHeader::decode(&b).unwrap(), h);
    }

    #[test]
    fn rejects() {
        let mut b = SessionHeader {
            session_id: Uuid::nil(),
            device_id: 1,
            fps: 30,
            resolution: Resolution::P360,
            deterministic_clock: false,
            start_ts_micros: 0,
        }
        .encode();
        assert_eq!(
            SessionHeader::decode(&b[..63]),
            Err(HeaderError::Truncated(63))
        );
        b[23] = 0;
        assert_eq!(SessionHeader::decode(&b), Err(HeaderError::BadFps(0)));
        b[23] = 30;
        b[24] = 9;
        assert_eq!(
            SessionHeader::decode(&b),
            Err(HeaderError::BadResolution(9))
        );
        b[24] = 0;
        b[63] = 1;
        assert_eq!(SessionHeader::decode(&b), Err(HeaderError::BadPadding));
        b[0] = b'X';
        assert_eq!(SessionHeader::decode(&b), Err(HeaderError::BadMagic));
    }
}
