use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GenerationTrace, PipelineError, SyntheticRecord};
use crate::mechanism::TokenId;

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub text: String,
    pub label: String,
    pub tokens: Vec<TokenId>,
    pub trace_ref: String,
    #[serde(default)]
    pub truncated: bool,
}

impl From<&SyntheticRecord> for CorpusRecord {
    fn from(r: &SyntheticRecord) -> Self {
        Self {
            text: r.text.clone(),
            label: r.label.clone(),
            tokens: r.tokens.clone(),
            trace_ref: r.trace.subset_id.clone(),
            truncated: r.truncated,
        }
    }
}

fn write_lines<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<(), PipelineError> {
    let file = File::create(path).map_err(|e| PipelineError::Io(format!("cannot create {}: {e}", path.display())))?;
    let mut w = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(&item).map_err(|e| PipelineError::Io(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| PipelineError::Io(e.to_string()))?;
    }
    w.flush().map_err(|e| PipelineError::Io(e.to_string()))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = File::open(path).map_err(|e| PipelineError::Io(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, records: &[CorpusRecord]) -> Result<(), PipelineError> {
    write_lines(path.as_ref(), records.iter())
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<CorpusRecord>, PipelineError> {
    read_lines(path.as_ref())
}

/// Traces are stored next to the corpus, one JSON object per line, keyed by `subset_id`.
pub fn write_traces(path: impl AsRef<Path>, records: &[SyntheticRecord]) -> Result<(), PipelineError> {
    write_lines(path.as_ref(), records.iter().map(|r| &r.trace))
}

pub fn read_traces(path: impl AsRef<Path>) -> Result<Vec<GenerationTrace>, PipelineError> {
    read_lines(path.as_ref())
}
