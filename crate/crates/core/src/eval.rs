//! Downstream utility of synthetic corpora.
//!
//! k-shot prompts use the Input/Answer layout:
//!
//! ```text
//! {header}
//! Input: {demo text}
//! Answer: {demo label}
//! ...
//! Input: {query}
//! Answer:
//! ```
//!
//! The model's reply is cut at the first newline and trimmed before scoring.

use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::pipeline::{read_dataset, CorpusRecord, PipelineError, PrivateExample};
use crate::provider::{decode_plain, LogitProvider, ProviderError};

pub const DEFAULT_HEADER: &str = "Classify the following examples:";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Provider(#[from] ProviderError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    /// Exact label match.
    Classification,
    /// Slot-string match after whitespace normalization.
    Extraction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IclTask {
    pub name: String,
    pub kind: TaskKind,
    /// Label set for classification, the slot name for extraction.
    pub labels: Vec<String>,
    pub test_examples: Vec<PrivateExample>,
    pub header: String,
}

/// On-disk task definition (TOML). `test_set` is resolved relative to the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDefinition {
    pub name: String,
    pub kind: TaskKind,
    pub labels: Vec<String>,
    pub test_set: PathBuf,
    #[serde(default)]
    pub header: Option<String>,
}

impl TaskDefinition {
    pub fn load(path: impl AsRef<Path>) -> Result<IclTask, EvalError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| EvalError::Config(format!("cannot read task definition {}: {e}", path.display())))?;
        let def: TaskDefinition = toml::from_str(&text)
            .map_err(|e| EvalError::Config(format!("invalid task definition {}: {e}", path.display())))?;
        let test_set = match path.parent() {
            Some(dir) if def.test_set.is_relative() => dir.join(&def.test_set),
            _ => def.test_set.clone(),
        };
        def.into_task(read_dataset(&test_set)?)
    }

    pub fn into_task(self, test_examples: Vec<PrivateExample>) -> Result<IclTask, EvalError> {
        if self.labels.is_empty() {
            return Err(EvalError::Config(format!("task {:?} has an empty label set", self.name)));
        }
        Ok(IclTask {
            name: self.name,
            kind: self.kind,
            labels: self.labels,
            test_examples,
            header: self.header.unwrap_or_else(|| DEFAULT_HEADER.to_string()),
        })
    }
}

/// Something that answers a k-shot prompt.
pub trait IclModel: Sync {
    fn predict(&self, prompt: &str) -> Result<String, EvalError>;
}

/// Greedy decoding on a provider until newline or `<eos>`.
pub struct GreedyIclModel<'a, P: LogitProvider + ?Sized> {
    provider: &'a P,
    max_answer_tokens: usize,
}

impl<'a, P: LogitProvider + ?Sized> GreedyIclModel<'a, P> {
    pub fn new(provider: &'a P, max_answer_tokens: usize) -> Self {
        Self {
            provider,
            max_answer_tokens,
        }
    }
}

impl<P: LogitProvider + ?Sized> IclModel for GreedyIclModel<'_, P> {
    fn predict(&self, prompt: &str) -> Result<String, EvalError> {
        let prompt = self.provider.tokenize(prompt)?;
        // Greedy decoding draws no randomness; the generator only satisfies the signature.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tokens = decode_plain(self.provider, &prompt, None, self.max_answer_tokens, true, &mut rng)?;
        Ok(self.provider.decode(&tokens)?)
    }
}

/// Assemble the k-shot prompt. Demo order is the caller's.
pub fn build_icl_prompt(header: &str, demos: &[(&str, &str)], query: &str) -> String {
    let mut prompt = String::new();
    if !header.is_empty() {
        prompt.push_str(header);
        prompt.push('\n');
    }
    for (text, label) in demos {
        prompt.push_str(&format!("Input: {text}\nAnswer: {label}\n"));
    }
    prompt.push_str(&format!("Input: {query}\nAnswer: "));
    prompt
}

/// First line of the reply, trimmed.
pub fn extract_answer(reply: &str) -> &str {
    reply.split('\n').next().unwrap_or("").trim()
}

pub fn answer_matches(kind: TaskKind, predicted: &str, gold: &str) -> bool {
    match kind {
        TaskKind::Classification => predicted == gold,
        TaskKind::Extraction => normalize_whitespace(predicted) == normalize_whitespace(gold),
    }
}

fn normalize_whitespace(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

pub fn k_shot_predict(
    model: &dyn IclModel,
    header: &str,
    demos: &[CorpusRecord],
    query: &str,
) -> Result<String, EvalError> {
    let pairs: Vec<(&str, &str)> = demos.iter().map(|d| (d.text.as_str(), d.label.as_str())).collect();
    let reply = model.predict(&build_icl_prompt(header, &pairs, query))?;
    Ok(extract_answer(&reply).to_string())
}

/// Pick `k` demos from `corpus`, returned as corpus indices in corpus order.
///
/// Classification: `k / L` demos per label, and the `k % L` remaining demos go
/// to distinct labels chosen at random. Extraction: `k` demos uniformly.
pub fn sample_demos<R: Rng + ?Sized>(
    corpus: &[CorpusRecord],
    task: &IclTask,
    k: usize,
    rng: &mut R,
) -> Result<Vec<usize>, EvalError> {
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut chosen = match task.kind {
        TaskKind::Extraction => {
            if corpus.len() < k {
                return Err(EvalError::Config(format!(
                    "k = {k} demos requested but the corpus holds {}",
                    corpus.len()
                )));
            }
            rand::seq::index::sample(rng, corpus.len(), k).into_vec()
        }
        TaskKind::Classification => {
            let l = task.labels.len();
            let mut quota = vec![k / l; l];
            let mut order: Vec<usize> = (0..l).collect();
            order.shuffle(rng);
            for &i in order.iter().take(k % l) {
                quota[i] += 1;
            }
            let mut chosen = Vec::with_capacity(k);
            for (label, &need) in task.labels.iter().zip(&quota) {
                if need == 0 {
                    continue;
                }
                let pool: Vec<usize> = (0..corpus.len()).filter(|&i| &corpus[i].label == label).collect();
                if pool.len() < need {
                    return Err(EvalError::Config(format!(
                        "k = {k} needs {need} demos with label {label:?}, corpus has {}",
                        pool.len()
                    )));
                }
                chosen.extend(pool.choose_multiple(rng, need).copied());
            }
            chosen
        }
    };
    chosen.sort_unstable();
    Ok(chosen)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub k: usize,
    pub runs: usize,
    /// Percentages.
    pub accuracy_mean: f64,
    /// Sample standard deviation; 0 for a single run.
    pub accuracy_std: f64,
    pub per_run: Vec<f64>,
}

impl EvalReport {
    pub fn from_accuracies(task: impl Into<String>, k: usize, per_run: Vec<f64>) -> Self {
        let n = per_run.len();
        let mean = if n == 0 { 0.0 } else { per_run.iter().sum::<f64>() / n as f64 };
        let std = if n < 2 {
            0.0
        } else {
            (per_run.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self {
            task: task.into(),
            k,
            runs: n,
            accuracy_mean: mean,
            accuracy_std: std,
            per_run,
        }
    }
}

impl std::fmt::Display for EvalReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "[icl evaluation] task={} k={} runs={}", self.task, self.k, self.runs)?;
        for (i, a) in self.per_run.iter().enumerate() {
            writeln!(f, "  run {i}: {a:.1}")?;
        }
        write!(f, "  accuracy = {:.1} +/- {:.1}", self.accuracy_mean, self.accuracy_std)
    }
}

/// k-shot accuracy over `runs` demo samplings.
///
/// Runs are evaluated one after another. With `parallel`, the test queries of
/// a run are predicted concurrently; the result does not depend on the order.
pub fn evaluate_icl(
    corpus: &[CorpusRecord],
    task: &IclTask,
    k: usize,
    runs: usize,
    seed: u64,
    model: &dyn IclModel,
    parallel: bool,
) -> Result<EvalReport, EvalError> {
    if runs == 0 {
        return Err(EvalError::Config("runs must be at least 1".into()));
    }
    if task.test_examples.is_empty() {
        return Err(EvalError::Config(format!("task {:?} has no test examples", task.name)));
    }
    if task.labels.is_empty() {
        return Err(EvalError::Config(format!("task {:?} has an empty label set", task.name)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_run = Vec::with_capacity(runs);
    for _ in 0..runs {
        let demos: Vec<CorpusRecord> = sample_demos(corpus, task, k, &mut rng)?
            .into_iter()
            .map(|i| corpus[i].clone())
            .collect();
        let score = |example: &PrivateExample| -> Result<bool, EvalError> {
            let predicted = k_shot_predict(model, &task.header, &demos, &example.text)?;
            Ok(answer_matches(task.kind, &predicted, &example.label))
        };
        let outcomes: Vec<bool> = if parallel {
            task.test_examples.par_iter().map(score).collect::<Result<_, _>>()?
        } else {
            task.test_examples.iter().map(score).collect::<Result<_, _>>()?
        };
        let correct = outcomes.iter().filter(|&&ok| ok).count();
        per_run.push(100.0 * correct as f64 / outcomes.len() as f64);
    }
    Ok(EvalReport::from_accuracies(task.name.clone(), k, per_run))
}

/// Operator-supplied validity check for parsed outputs.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Schema {
    AcceptAll,
    /// A JSON object with at least one key.
    #[default]
    NonEmptyObject,
    /// A JSON object holding every listed key.
    RequiredKeys { keys: Vec<String> },
}

impl Schema {
    pub fn check(&self, value: &Value) -> bool {
        match self {
            Schema::AcceptAll => true,
            Schema::NonEmptyObject => value.as_object().is_some_and(|o| !o.is_empty()),
            Schema::RequiredKeys { keys } => value
                .as_object()
                .is_some_and(|o| keys.iter().all(|k| o.contains_key(k))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StructuredReport {
    /// Percent of outputs that parse as JSON.
    pub parse_rate: f64,
    /// Percent of outputs that parse and pass the schema.
    pub validate_rate: f64,
    pub raw_count: usize,
}

impl StructuredReport {
    /// Rates rounded to one decimal.
    pub fn rounded(&self) -> (f64, f64, usize) {
        let r = |x: f64| (x * 10.0).round() / 10.0;
        (r(self.parse_rate), r(self.validate_rate), self.raw_count)
    }
}

impl std::fmt::Display for StructuredReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[structured evaluation] parse = {:.1}%  validate = {:.1}%  raw = {}",
            self.parse_rate, self.validate_rate, self.raw_count
        )
    }
}

pub fn evaluate_structured<S: AsRef<str>>(outputs: &[S], schema: &Schema) -> StructuredReport {
    evaluate_structured_with(outputs, |v| schema.check(v))
}

pub fn evaluate_structured_with<S: AsRef<str>>(outputs: &[S], check: impl Fn(&Value) -> bool) -> StructuredReport {
    let n = outputs.len();
    let mut parsed = 0usize;
    let mut valid = 0usize;
    for out in outputs {
        if let Ok(value) = serde_json::from_str::<Value>(out.as_ref().trim()) {
            parsed += 1;
            if check(&value) {
                valid += 1;
            }
        }
    }
    let pct = |x: usize| if n == 0 { 0.0 } else { 100.0 * x as f64 / n as f64 };
    StructuredReport {
        parse_rate: pct(parsed),
        validate_rate: pct(valid),
        raw_count: n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn record(text: &str, label: &str) -> CorpusRecord {
        CorpusRecord {
            text: text.into(),
            label: label.into(),
            tokens: Vec::new(),
            trace_ref: String::new(),
            truncated: false,
        }
    }

    fn task(n: usize) -> IclTask {
        IclTask {
            name: "toy".into(),
            kind: TaskKind::Classification,
            labels: vec!["pos".into(), "neg".into()],
            test_examples: (0..n)
                .map(|i| PrivateExample::new(format!("q{i:02}"), if i % 2 == 0 { "pos" } else { "neg" }).unwrap())
                .collect(),
            header: DEFAULT_HEADER.into(),
        }
    }

    fn query_of(prompt: &str) -> &str {
        let last = prompt.rsplit("Input: ").next().unwrap();
        last.split('\n').next().unwrap()
    }

    fn gold(q: &str) -> &'static str {
        let i: usize = q[1..].parse().unwrap();
        if i % 2 == 0 {
            "pos"
        } else {
            "neg"
        }
    }

    struct Oracle;

    impl IclModel for Oracle {
        fn predict(&self, prompt: &str) -> Result<String, EvalError> {
            Ok(format!(" {}\nInput: junk", gold(query_of(prompt))))
        }
    }

    /// Correct on queries with index below the current run's threshold.
    struct PerRun {
        thresholds: Vec<usize>,
        per_run: usize,
        calls: AtomicUsize,
    }

    impl IclModel for PerRun {
        fn predict(&self, prompt: &str) -> Result<String, EvalError> {
            let run = self.calls.fetch_add(1, Ordering::SeqCst) / self.per_run;
            let q = query_of(prompt);
            let i: usize = q[1..].parse().unwrap();
            Ok(if i < self.thresholds[run] { gold(q).into() } else { "wrong".into() })
        }
    }

    #[test]
    fn prompt_layout() {
        let p = build_icl_prompt("H", &[("a b", "x"), ("c", "y")], "q");
        assert_eq!(p, "H\nInput: a b\nAnswer: x\nInput: c\nAnswer: y\nInput: q\nAnswer: ");
        assert_eq!(build_icl_prompt("", &[], "q"), "Input: q\nAnswer: ");
    }

    #[test]
    fn answer_extraction_and_matching() {
        assert_eq!(extract_answer("  Sports \nInput: more"), "Sports");
        assert_eq!(extract_answer(""), "");
        assert!(answer_matches(TaskKind::Extraction, "the  dark\tknight", "the dark knight"));
        assert!(!answer_matches(TaskKind::Classification, "sports", "Sports"));
    }

    #[test]
    fn all_correct_is_100() {
        let corpus = vec![record("d1", "pos"), record("d2", "neg")];
        let r = evaluate_icl(&corpus, &task(10), 2, 1, 0, &Oracle, false).unwrap();
        assert_eq!(r.per_run, vec![100.0]);
        assert_eq!(r.accuracy_std, 0.0);
    }

    #[test]
    fn two_of_three() {
        let model = PerRun {
            thresholds: vec![2],
            per_run: 3,
            calls: AtomicUsize::new(0),
        };
        let r = evaluate_icl(&[], &task(3), 0, 1, 0, &model, false).unwrap();
        assert_eq!((r.accuracy_mean * 10.0).round() / 10.0, 66.7);
    }

    #[test]
    fn scripted_runs_mean_and_sample_std() {
        let model = PerRun {
            thresholds: vec![14, 15, 16],
            per_run: 20,
            calls: AtomicUsize::new(0),
        };
        let corpus = vec![record("d1", "pos"), record("d2", "neg")];
        let r = evaluate_icl(&corpus, &task(20), 2, 3, 7, &model, true).unwrap();
        assert_eq!(r.per_run, vec![70.0, 75.0, 80.0]);
        assert!((r.accuracy_mean - 75.0).abs() < 1e-12);
        assert!((r.accuracy_std - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_shot_ignores_corpus_and_large_k_fails() {
        assert!(evaluate_icl(&[], &task(4), 0, 1, 0, &Oracle, false).is_ok());
        let corpus = vec![record("d1", "pos"), record("d2", "neg")];
        assert!(matches!(
            evaluate_icl(&corpus, &task(4), 4, 1, 0, &Oracle, false),
            Err(EvalError::Config(_))
        ));
    }

    #[test]
    fn demo_quota_with_remainder() {
        let corpus: Vec<_> = (0..9)
            .map(|i| record(&format!("d{i}"), ["a", "b", "c"][i % 3]))
            .collect();
        let mut t = task(1);
        t.labels = vec!["a".into(), "b".into(), "c".into()];
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for k in 0..=9 {
            let idx = sample_demos(&corpus, &t, k, &mut rng).unwrap();
            assert_eq!(idx.len(), k);
            assert!(idx.windows(2).all(|w| w[0] < w[1]));
            for label in ["a", "b", "c"] {
                let n = idx.iter().filter(|&&i| corpus[i].label == label).count();
                assert!(n == k / 3 || n == k / 3 + 1);
            }
        }
    }

    #[test]
    fn structured_rates() {
        let r = evaluate_structured(&["{\"title\": \"x\"}", "{}", "not json"], &Schema::NonEmptyObject);
        assert_eq!(r.rounded(), (66.7, 33.3, 3));
        assert_eq!(evaluate_structured(&["", "", ""], &Schema::default()).rounded(), (0.0, 0.0, 3));
        assert_eq!(evaluate_structured(&["{}"], &Schema::AcceptAll).rounded(), (100.0, 100.0, 1));
        let keys = Schema::RequiredKeys {
            keys: vec!["a".into()],
        };
        assert_eq!(evaluate_structured(&["{\"a\":1}", "{\"b\":1}"], &keys).rounded(), (100.0, 50.0, 2));
    }
}
