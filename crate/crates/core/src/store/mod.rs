//! Persistence for the state machines: an append-only journal of events,
//! and a key vault that seals identifying data so that destroying a key
//! erases the data from every journal copy.

mod clock;
mod journal;
mod vault;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use clock::{Clock, LogicalClock, SystemClock};
pub use journal::{Journal, JournalEntry, JournalHeader, JOURNAL_FORMAT, JOURNAL_VERSION};
pub use vault::{SealedBlob, Vault};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{path}:{line}: {msg}")]
    Corrupt { path: String, line: usize, msg: String },
    #[error("blob {0} has been shredded")]
    Shredded(String),
    #[error("blob {0} failed authentication")]
    Tampered(String),
    #[error("serialization: {0}")]
    Serde(#[from] serde_json::Error),
}

/// Journal and vault of one state machine.
pub struct Store {
    pub journal: Journal,
    pub vault: Vault,
}

impl Store {
    /// In-memory store. A seed makes vault keys reproducible, which the
    /// simulator needs for byte-identical logs.
    pub fn memory(stream: &str, seed: Option<u64>) -> Self {
        Store { journal: Journal::memory(stream), vault: Vault::memory(seed) }
    }

    /// `<dir>/<stream>.journal.jsonl` and `<dir>/<stream>.vault.json`.
    pub fn open(dir: &Path, stream: &str) -> Result<Self, StoreError> {
        std::fs::create_dir_all(dir)?;
        Ok(Store {
            journal: Journal::open(&journal_path(dir, stream), stream)?,
            vault: Vault::open(&dir.join(format!("{stream}.vault.json")))?,
        })
    }

    /// Everything this store has written, for full-text scans.
    pub fn persisted_bytes(&self) -> Vec<u8> {
        let mut out = self.journal.to_bytes();
        out.extend(self.vault.to_bytes());
        out
    }
}

pub fn journal_path(dir: &Path, stream: &str) -> PathBuf {
    dir.join(format!("{stream}.journal.jsonl"))
}
