//! EXSG segment files: `"EXSG" ∥ 0x01 ∥ EXFR records ∥ crc32 (LE)`, the
//! checksum covering every byte before it.

use std::io::{self, Write};

use crate::frame::{FrameError, FrameRecord};

pub const SEGMENT_MAGIC: [u8; 4] = *b"EXSG";
pub const SEGMENT_VERSION: u8 = 0x01;
pub const SEGMENT_HEADER_LEN: usize = 5;
/// Delivered frames per segment before rotation.
pub const FRAMES_PER_SEGMENT: u64 = 300;

pub fn segment_file_name(first_frame_index: u64) -> String {
    format!("{first_frame_index:08}.seg")
}

#[derive(Debug, thiserror::Error)]
pub enum SegmentError {
    #[error("bad segment magic")]
    BadMagic,
    #[error("unsupported segment version {0}")]
    BadVersion(u8),
    #[error("segment truncated ({0} bytes)")]
    Truncated(usize),
    #[error("segment checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("record {ordinal} in segment: {source}")]
    Frame {
        ordinal: usize,
        #[source]
        source: FrameError,
    },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Streams records into a segment, maintaining the running checksum.
pub struct SegmentWriter<W: Write> {
    inner: W,
    hasher: crc32fast::Hasher,
    first_frame_index: Option<u64>,
    frames: u64,
    bytes: u64,
}

impl<W: Write> SegmentWriter<W> {
    pub fn new(mut inner: W) -> io::Result<Self> {
        let mut hasher = crc32fast::Hasher::new();
        inner.write_all(&SEGMENT_MAGIC)?;
        inner.write_all(&[SEGMENT_VERSION])?;
        hasher.update(&SEGMENT_MAGIC);
        hasher.update(&[SEGMENT_VERSION]);
        Ok(SegmentWriter {
            inner,
            hasher,
            first_frame_index: None,
            frames: 0,
            bytes: SEGMENT_HEADER_LEN as u64,
        })
    }

    /// Appends an already-encoded EXFR record for frame `frame_index`.
    pub fn append_encoded(&mut self, frame_index: u64, record: &[u8]) -> io::Result<()> {
        self.inner.write_all(record)?;
        self.hasher.update(record);
        self.first_frame_index.get_or_insert(frame_index);
        self.frames += 1;
        self.bytes += record.len() as u64;
        Ok(())
    }

    pub fn append(&mut self, frame: &FrameRecord) -> io::Result<()> {
        self.append_encoded(frame.frame_index, &frame.encode())
    }

    pub fn frames(&self) -> u64 {
        self.frames
    }

    pub fn first_frame_index(&self) -> Option<u64> {
        self.first_frame_index
    }

    /// Writes the trailing checksum and returns the writer with it.
    pub fn finish(mut self) -> io::Result<(W, u32)> {
        let crc = self.hasher.clone().finalize();
        self.inner.write_all(&crc.to_le_bytes())?;
        self.inner.flush()?;
        Ok((self.inner, crc))
    }
}

/// Encodes a whole segment in memory.
pub fn encode_segment(frames: &[FrameRecord]) -> Vec<u8> {
    let mut w = SegmentWriter::new(Vec::new()).expect("vec write");
    for f in frames {
        w.append(f).expect("vec write");
    }
    w.finish().expect("vec write").0
}

/// Checks magic, version and trailer; returns the stored checksum and the
/// record bytes.
pub fn split_segment(bytes: &[u8]) -> Result<(u32, &[u8]), SegmentError> {
    if bytes.len() < SEGMENT_HEADER_LEN + 4 {
        if bytes.len() >= 4 && bytes[..4] != SEGMENT_MAGIC {
            return Err(SegmentError::BadMagic);
        }
        return Err(SegmentError::Truncated(bytes.len()));
    }
    if bytes[..4] != SEGMENT_MAGIC {
        return Err(SegmentError::BadMagic);
    }
    if bytes[4] != SEGMENT_VERSION {
        return Err(SegmentError::BadVersion(bytes[4]));
    }
    let body_end = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_end..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(&bytes[..body_end]);
    if stored != computed {
        return Err(SegmentError::ChecksumMismatch { stored, computed });
    }
    Ok((stored, &bytes[SEGMENT_HEADER_LEN..body_end]))
}

/// Iterates the records of a verified segment body.
pub struct SegmentRecords<'a> {
    rest: &'a [u8],
    ordinal: usize,
}

impl<'a> SegmentRecords<'a> {
    pub fn new(body: &'a [u8]) -> Self {
        SegmentRecords {
            rest: body,
            ordinal: 0,
        }
    }
}

impl Iterator for SegmentRecords<'_> {
    type Item = Result<FrameRecord, SegmentError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.rest.is_empty() {
            return None;
        }
        let ordinal = self.ordinal;
        self.ordinal += 1;
        match FrameRecord::decode_prefix(self.rest) {
            Ok((frame, used)) => {
                self.rest = &self.rest[used..];
                Some(Ok(frame))
            }
            Err(source) => {
                self.rest = &[];
                Some(Err(SegmentError::Frame { ordinal, source }))
            }
        }
    }
}

/// Decodes every record of a segment file, verifying its checksum.
pub fn decode_segment(bytes: &[u8]) -> Result<Vec<FrameRecord>, SegmentError> {
    let (_, body) = split_segment(bytes)?;
    SegmentRecords::new(body).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolution::Resolution;
    use uuid::Uuid;

    fn frame(i: u64) -> FrameRecord {
        let mut px = vec![128u8; Resolution::P360.pixel_bytes()];
        px[..8].copy_from_slice(&i.to_le_bytes());
        FrameRecord::raw(Uuid::nil(), 2, i, i * 10, Resolution::P360, px)
            .reencode(crate::frame::Encoding::RleRgb24)
            .unwrap()
    }

    #[test]
    fn names() {
        assert_eq!(segment_file_name(0), "00000000.seg");
        assert_eq!(segment_file_name(600), "00000600.seg");
    }

    #[test]
    fn layout_and_checksum() {
        let frames: Vec<_> = (0..3).map(frame).collect();
        let bytes = encode_segment(&frames);
        assert_eq!(&bytes[..5], b"EXSG\x01");
        let body_len: usize = frames.iter().map(|f| f.encoded_len()).sum();
        assert_eq!(bytes.len(), 5 + body_len + 4);
        let crc = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        assert_eq!(crc, crc32fast::hash(&bytes[..bytes.len() - 4]));
        assert_eq!(decode_segment(&bytes).unwrap(), frames);
    }

    #[test]
    fn tamper_detected() {
        let mut bytes = encode_segment(&[frame(0)]);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x01;
        assert!(matches!(
            decode_segment(&bytes),
            Err(SegmentError::ChecksumMismatch { .. })
        ));
        assert!(matches!(
            decode_segment(b"EXSX\x01\0\0\0\0"),
            Err(SegmentError::BadMagic)
        ));
        assert!(matches!(
            decode_segment(b"EXSG"),
            Err(SegmentError::Truncated(4))
        ));
    }

    #[test]
    fn empty_segment() {
        let bytes = encode_segment(&[]);
        assert_eq!(bytes.len(), 9);
        assert!(decode_segment(&bytes).unwrap().is_empty());
    }
}
