//! Conversation-style `{instruction, input, output}` records.
//!
//! The same record type feeds instruction tuning (written as JSONL) and
//! in-context demonstrations (rendered by [`crate::promptkit`]), so both see
//! one target grammar: one `"<surface>" is <label>` line per entity, or the
//! single line `no entities`.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{bio_to_spans, detokenize, EntitySpan, LabeledSentence};

/// Output line used when a sentence has no entities.
pub const NO_ENTITIES: &str = "no entities";

/// Default task description. This wording is a repository default, not a
/// transcription of any published prompt; override it in the run config.
pub const DEFAULT_TASK_DESCRIPTION: &str = "You are a biomedical information extraction assistant. \
Extract the PICO elements (Participants, Interventions, Outcomes) mentioned in the input sentence \
from a clinical trial abstract. Write one entity per line in the form \"<entity>\" is <type>, \
where <type> is Participants, Interventions or Outcomes. Copy each entity exactly as it appears \
in the input. If the sentence mentions none, write: no entities";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstructRecord {
    pub instruction: String,
    pub input: String,
    pub output: String,
}

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Malformed { path: PathBuf, line: usize, message: String },
}

/// One line per span in span order, or [`NO_ENTITIES`].
pub fn serialize_extractions(spans: &[EntitySpan]) -> String {
    if spans.is_empty() {
        return NO_ENTITIES.to_string();
    }
    spans.iter().map(|s| format!("\"{}\" is {}", s.surface, s.label)).collect::<Vec<_>>().join("\n")
}

pub fn sentence_to_record(s: &LabeledSentence, task_description: &str) -> InstructRecord {
    InstructRecord {
        instruction: task_description.to_string(),
        input: detokenize(s.tokens()).text,
        output: serialize_extractions(&bio_to_spans(s)),
    }
}

/// Write one JSON record per line; returns the number of records written.
pub fn write_dataset(records: &[InstructRecord], path: &Path) -> Result<usize, DatasetError> {
    let io_err = |source| DatasetError::Io { path: path.to_path_buf(), source };
    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io_err(e.into()))?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(records.len())
}

pub fn read_dataset(path: &Path) -> Result<Vec<InstructRecord>, DatasetError> {
    let file = File::open(path).map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io { path: path.to_path_buf(), source })?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DatasetError::Malformed {
            path: path.to_path_buf(),
            line: n + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
