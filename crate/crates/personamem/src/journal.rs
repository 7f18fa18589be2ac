//! Memory journals: one versioned JSON line per store event.
//!
//! Line format: `{"v":1,"seq":0,"event":{"type":"add_persona",...}}`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use personamem_core::memory::{MemoryEvent, MemoryStore, StoreError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const JOURNAL_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum JournalError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("corrupt journal at line {line}: {message}")]
    CorruptLog { line: usize, message: String },
}

#[derive(Serialize, Deserialize)]
struct Line {
    v: u32,
    seq: u64,
    event: MemoryEvent,
}

/// Appends a store's pending events to a journal file.
///
/// `flush` may be called with a shared reference to the store: it writes
/// every pending event not yet written and syncs the file.
pub struct JournalWriter {
    out: BufWriter<File>,
    written: usize,
    seq: u64,
}

impl JournalWriter {
    /// Create a new journal; fails if the file exists.
    pub fn create(path: &Path) -> Result<Self, JournalError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().write(true).create_new(true).open(path)?;
        Ok(JournalWriter {
            out: BufWriter::new(file),
            written: 0,
            seq: 0,
        })
    }

    pub fn flush(&mut self, store: &MemoryStore) -> Result<(), JournalError> {
        let pending = store.pending();
        if self.written > pending.len() {
            self.written = 0;
        }
        for event in &pending[self.written..] {
            let line = Line {
                v: JOURNAL_VERSION,
                seq: self.seq,
                event: event.clone(),
            };
            serde_json::to_writer(&mut self.out, &line).map_err(std::io::Error::from)?;
            self.out.write_all(b"\n")?;
            self.seq += 1;
        }
        self.written = pending.len();
        self.out.flush()?;
        self.out.get_ref().sync_data()?;
        Ok(())
    }

    /// Flush, then clear the store's pending events.
    pub fn finish(mut self, store: &mut MemoryStore) -> Result<u64, JournalError> {
        self.flush(store)?;
        store.drain_pending();
        Ok(self.seq)
    }
}

pub fn read_journal(path: &Path) -> Result<Vec<MemoryEvent>, JournalError> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let corrupt = |message: String| JournalError::CorruptLog { line: i + 1, message };
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Line = serde_json::from_str(&line).map_err(|e| corrupt(e.to_string()))?;
        if parsed.v != JOURNAL_VERSION {
            return Err(corrupt(format!("unsupported version {}", parsed.v)));
        }
        if parsed.seq != events.len() as u64 {
            return Err(corrupt(format!("sequence {} out of order", parsed.seq)));
        }
        events.push(parsed.event);
    }
    Ok(events)
}

pub fn replay_events(events: Vec<MemoryEvent>) -> Result<MemoryStore, JournalError> {
    MemoryStore::replay(events).map_err(|(i, e): (usize, StoreError)| JournalError::CorruptLog {
        line: i + 1,
        message: e.to_string(),
    })
}

pub fn replay_file(path: &Path) -> Result<MemoryStore, JournalError> {
    replay_events(read_journal(path)?)
}

pub fn snapshot(store: &MemoryStore) -> String {
    serde_json::to_string_pretty(store).expect("store serializes")
}
