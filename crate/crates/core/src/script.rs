//! Command scripts for reproducible runs: one command per line,
//! `<frame_index_at_or_after> <KIND> [value]`. Blank lines and `#` comments
//! are ignored.

use crate::command::{CommandKind, ParseCommandError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScriptEntry {
    pub at_frame: u64,
    pub command: CommandKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ScriptError {
    #[error("line {line}: bad frame index `{found}`")]
    BadFrame { line: usize, found: String },
    #[error("line {line}: {source}")]
    BadCommand {
        line: usize,
        #[source]
        source: ParseCommandError,
    },
    #[error("line {line}: frame {frame} is earlier than the previous entry")]
    OutOfOrder { line: usize, frame: u64 },
}

pub fn parse_script(text: &str) -> Result<Vec<ScriptEntry>, ScriptError> {
    let mut entries: Vec<ScriptEntry> = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n + 1;
        let content = raw.split('#').next().unwrap_or_default().trim();
        if content.is_empty() {
            continue;
        }
        let (frame, rest) = content
            .split_once(char::is_whitespace)
            .unwrap_or((content, ""));
        let at_frame = frame.parse::<u64>().map_err(|_| ScriptError::BadFrame {
            line,
            found: frame.to_string(),
        })?;
        let command = rest
            .trim()
            .parse::<CommandKind>()
            .map_err(|source| ScriptError::BadCommand { line, source })?;
        if entries.last().is_some_and(|e| e.at_frame > at_frame) {
            return Err(ScriptError::OutOfOrder {
                line,
                frame: at_frame,
            });
        }
        entries.push(ScriptEntry { at_frame, command });
    }
    Ok(entries)
}
