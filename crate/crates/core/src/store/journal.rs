use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::StoreError;

pub const JOURNAL_FORMAT: &str = "linkwerk-journal";
pub const JOURNAL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JournalHeader {
    pub format: String,
    pub version: u32,
    pub stream: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JournalEntry {
    pub seq: u64,
    pub ts: DateTime<Utc>,
    #[serde(rename = "type")]
    pub kind: String,
    pub payload: Value,
}

/// Append-only JSON-lines log. The first line is a [`JournalHeader`];
/// sequence numbers start at 1 and increase by one.
#[derive(Debug)]
pub struct Journal {
    header: JournalHeader,
    entries: Vec<JournalEntry>,
    file: Option<(PathBuf, File)>,
}

impl Journal {
    pub fn memory(stream: &str) -> Self {
        Journal { header: header(stream), entries: Vec::new(), file: None }
    }

    /// Opens or creates a journal file. A torn final line (a crash during
    /// append) is cut off; anything else malformed is an error.
    pub fn open(path: &Path, stream: &str) -> Result<Self, StoreError> {
        let corrupt = |line: usize, msg: String| StoreError::Corrupt { path: path.display().to_string(), line, msg };
        let mut entries = Vec::new();
        let expected = header(stream);
        if path.exists() {
            let text = std::fs::read(path)?;
            let complete = text.iter().rposition(|&b| b == b'\n').map_or(0, |p| p + 1);
            if complete < text.len() {
                OpenOptions::new().write(true).open(path)?.set_len(complete as u64)?;
            }
            let mut lines = BufReader::new(&text[..complete]).lines().enumerate();
            if let Some((_, line)) = lines.next() {
                let h: JournalHeader =
                    serde_json::from_str(&line?).map_err(|e| corrupt(1, e.to_string()))?;
                if h != expected {
                    return Err(corrupt(1, format!("unexpected header {h:?}")));
                }
            }
            for (i, line) in lines {
                let e: JournalEntry = serde_json::from_str(&line?).map_err(|e| corrupt(i + 1, e.to_string()))?;
                if e.seq != entries.len() as u64 + 1 {
                    return Err(corrupt(i + 1, format!("sequence {} out of order", e.seq)));
                }
                entries.push(e);
            }
        }
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if file.metadata()?.len() == 0 {
            writeln!(file, "{}", serde_json::to_string(&expected)?)?;
            file.sync_data()?;
        }
        Ok(Journal { header: expected, entries, file: Some((path.to_path_buf(), file)) })
    }

    pub fn header(&self) -> &JournalHeader {
        &self.header
    }

    pub fn path(&self) -> Option<&Path> {
        self.file.as_ref().map(|(p, _)| p.as_path())
    }

    /// Writes and syncs the entry before returning it.
    pub fn append(&mut self, kind: &str, payload: Value, ts: DateTime<Utc>) -> Result<&JournalEntry, StoreError> {
        let entry = JournalEntry { seq: self.entries.len() as u64 + 1, ts, kind: kind.to_string(), payload };
        if let Some((_, f)) = &mut self.file {
            let mut line = serde_json::to_vec(&entry)?;
            line.push(b'\n');
            f.write_all(&line)?;
            f.sync_data()?;
        }
        self.entries.push(entry);
        Ok(self.entries.last().expect("just pushed"))
    }

    pub fn entries(&self) -> &[JournalEntry] {
        &self.entries
    }

    pub fn last_seq(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn since(&self, seq: u64) -> &[JournalEntry] {
        &self.entries[(seq as usize).min(self.entries.len())..]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(&self.header).expect("header");
        out.push(b'\n');
        for e in &self.entries {
            out.extend(serde_json::to_vec(e).expect("entry"));
            out.push(b'\n');
        }
        out
    }
}

fn header(stream: &str) -> JournalHeader {
    JournalHeader { format: JOURNAL_FORMAT.into(), version: JOURNAL_VERSION, stream: stream.into() }
}
