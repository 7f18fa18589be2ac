//! JSONL corpus loader.
//!
//! One JSON object per line, one line per session:
//! `{"dialogue_id": "d1", "session": 1, "turns": [{"speaker": "A", "text": "...", "personas": ["..."]}]}`.
//! Sessions of a dialogue may appear in any order but must cover 1..=N.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use personamem_core::ingest::{Dialogue, SessionTranscript, TranscriptError};
use serde::Deserialize;
use thiserror::Error;

pub const SPEAKERS: [&str; 2] = ["A", "B"];

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus {path} not readable: {source}")]
    Missing {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error("corpus is empty")]
    Empty,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTurn {
    speaker: String,
    text: String,
    #[serde(default)]
    personas: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSession {
    dialogue_id: String,
    session: u32,
    turns: Vec<RawTurn>,
}

fn schema(line: usize, message: impl Into<String>) -> CorpusError {
    CorpusError::Schema {
        line,
        message: message.into(),
    }
}

fn parse_line(line_no: usize, line: &str) -> Result<SessionTranscript, CorpusError> {
    let raw: RawSession = serde_json::from_str(line).map_err(|e| schema(line_no, e.to_string()))?;
    if raw.session == 0 {
        return Err(schema(line_no, "session index must be at least 1"));
    }
    let mut turns = Vec::with_capacity(raw.turns.len());
    for (i, t) in raw.turns.into_iter().enumerate() {
        if !SPEAKERS.contains(&t.speaker.as_str()) {
            return Err(schema(
                line_no,
                format!("turn {i}: speaker {:?} is not A or B", t.speaker),
            ));
        }
        if t.personas.iter().any(|p| p.trim().is_empty()) {
            return Err(schema(line_no, format!("turn {i}: empty persona annotation")));
        }
        turns.push(personamem_core::ingest::Turn {
            speaker: t.speaker.as_str().into(),
            text: t.text,
            personas: t.personas,
        });
    }
    Ok(SessionTranscript {
        dialogue_id: raw.dialogue_id,
        session: raw.session,
        turns,
    })
}

/// Parse corpus text. Dialogues keep the order of their first line.
pub fn parse_corpus(text: &str) -> Result<Vec<Dialogue>, CorpusError> {
    let mut order: Vec<String> = Vec::new();
    let mut sessions: BTreeMap<String, Vec<SessionTranscript>> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let t = parse_line(i + 1, line)?;
        let entry = sessions.entry(t.dialogue_id.clone()).or_insert_with(|| {
            order.push(t.dialogue_id.clone());
            Vec::new()
        });
        if entry.iter().any(|s| s.session == t.session) {
            return Err(schema(
                i + 1,
                format!("duplicate session {} of {}", t.session, t.dialogue_id),
            ));
        }
        entry.push(t);
    }
    if order.is_empty() {
        return Err(CorpusError::Empty);
    }
    order
        .into_iter()
        .map(|id| {
            let s = sessions.remove(&id).expect("grouped above");
            Dialogue::new(id, s).map_err(CorpusError::from)
        })
        .collect()
}

pub fn load_corpus(path: &Path) -> Result<Vec<Dialogue>, CorpusError> {
    let text = fs::read_to_string(path).map_err(|source| CorpusError::Missing {
        path: path.to_path_buf(),
        source,
    })?;
    parse_corpus(&text)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CorpusSummary {
    pub dialogues: usize,
    pub transcripts: usize,
    pub turns: usize,
    pub annotations: usize,
    pub unannotated_sessions: usize,
}

pub fn summarize(dialogues: &[Dialogue]) -> CorpusSummary {
    let mut s = CorpusSummary {
        dialogues: dialogues.len(),
        ..Default::default()
    };
    for t in dialogues.iter().flat_map(|d| &d.sessions) {
        s.transcripts += 1;
        s.turns += t.turns.len();
        s.annotations += t.annotation_count();
        if t.annotation_count() == 0 {
            s.unannotated_sessions += 1;
        }
    }
    s
}
