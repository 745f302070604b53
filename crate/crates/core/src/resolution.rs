use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

/// Frame size presets a capture device can stream at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Resolution {
    #[serde(rename = "360p")]
    P360,
    #[serde(rename = "720p")]
    P720,
    #[serde(rename = "1080p")]
    P1080,
}

impl Resolution {
    pub const ALL: [Resolution; 3] = [Resolution::P360, Resolution::P720, Resolution::P1080];

    pub const fn width(self) -> u16 {
        match self {
            Resolution::P360 => 640,
            Resolution::P720 => 1280,
            Resolution::P1080 => 1920,
        }
    }

    pub const fn height(self) -> u16 {
        match self {
            Resolution::P360 => 360,
            Resolution::P720 => 720,
            Resolution::P1080 => 1080,
        }
    }

    /// Size in bytes of one decoded RGB24 frame.
    pub const fn pixel_bytes(self) -> usize {
        self.width() as usize * self.height() as usize * 3
    }

    pub const fn name(self) -> &'static str {
        match self {
            Resolution::P360 => "360p",
            Resolution::P720 => "720p",
            Resolution::P1080 => "1080p",
        }
    }

    /// Wire code used in the session header.
    pub const fn code(self) -> u8 {
        match self {
            Resolution::P360 => 0,
            Resolution::P720 => 1,
            Resolution::P1080 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.code() == code)
    }

    pub fn from_dims(width: u16, height: u16) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.width() == width && r.height() == height)
    }
}

impl fmt::Display for Resolution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, thiserror::Error)]
#[error("unknown resolution preset `{0}` (expected 360p, 720p or 1080p)")]
pub struct UnknownResolution(pub String);

impl FromStr for Resolution {
    type Err = UnknownResolution;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| UnknownResolution(s.to_string()))
    }
}
