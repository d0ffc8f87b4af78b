use std::collections::BTreeMap;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PipelineError;

/// One private data point `(text, label)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrivateExample {
    pub text: String,
    pub label: String,
}

impl PrivateExample {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Result<Self, PipelineError> {
        let example = Self {
            text: text.into(),
            label: label.into(),
        };
        example.validate()?;
        Ok(example)
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.text.is_empty() {
            return Err(PipelineError::InvalidInput("private example text is empty".into()));
        }
        Ok(())
    }
}

/// Read line-delimited `{"text", "label"}` records. Blank lines are skipped.
pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<PrivateExample>, PipelineError> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)
        .map_err(|e| PipelineError::Io(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| PipelineError::Io(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let example: PrivateExample = serde_json::from_str(&line).map_err(|e| PipelineError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        example.validate().map_err(|e| PipelineError::Parse {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(example);
    }
    Ok(out)
}

/// A disjoint group of exactly `s` examples (indices into the dataset).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subset {
    pub label: Option<String>,
    pub members: Vec<usize>,
}

/// Split `data` into disjoint subsets of exactly `s` examples.
///
/// Indices are shuffled with `rng`, then chunked; the `len % s` leftover of
/// every pool is dropped. With `per_label`, each label is its own pool (in
/// sorted label order) and every subset is single-label.
pub fn partition_dataset<R: Rng + ?Sized>(
    data: &[PrivateExample],
    s: usize,
    per_label: bool,
    rng: &mut R,
) -> Result<Vec<Subset>, PipelineError> {
    if s == 0 {
        return Err(PipelineError::InvalidInput("subset size must be at least 1".into()));
    }
    if data.len() < s {
        return Err(PipelineError::InsufficientData {
            label: None,
            needed: s,
            available: data.len(),
        });
    }
    let mut subsets = Vec::new();
    for (label, mut pool) in pools(data, per_label) {
        pool.shuffle(rng);
        for chunk in pool.chunks_exact(s) {
            subsets.push(Subset {
                label: label.clone(),
                members: chunk.to_vec(),
            });
        }
    }
    Ok(subsets)
}

pub(crate) fn pools(data: &[PrivateExample], per_label: bool) -> BTreeMap<Option<String>, Vec<usize>> {
    let mut pools: BTreeMap<Option<String>, Vec<usize>> = BTreeMap::new();
    for (i, e) in data.iter().enumerate() {
        let key = per_label.then(|| e.label.clone());
        pools.entry(key).or_default().push(i);
    }
    pools
}

/// Per-example seed from a master seed and a counter (SplitMix64 finalizer).
pub fn derive_seed(master: u64, counter: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(counter.wrapping_mul(0xbf58_476d_1ce4_e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
