//! End-to-end private generation.
//!
//! [`Generator::generate_example`] runs the per-token private prediction loop
//! for one disjoint subset of `s` private examples:
//!
//! 1. open one session per private prompt and one for the public prompt;
//! 2. per step, clip and average the `s` private logit vectors, clip the
//!    public logits, blend both, sample from `softmax(blended / tau)` and
//!    charge the budget ledger;
//! 3. stop at `<eos>` or once `T` steps have been charged, otherwise append
//!    the token to every session.
//!
//! [`Generator::generate_corpus`] assigns every requested example its own
//! subset (no subset is reused) and a seed derived from the master seed.

mod corpus;
mod dataset;
mod template;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::accountant::{AccountantReport, AccountingError, BudgetLedger, PrivacyMode, SamplingPlan};
use crate::mechanism::{
    aggregate_private, blend, clip_logits, token_distribution, LogitVector, MechanismError, TokenDistribution,
    TokenId,
};
use crate::provider::{LogitProvider, ProviderError, ProviderSession};

pub use corpus::{read_corpus, read_traces, write_corpus, write_traces, CorpusRecord};
pub use dataset::{derive_seed, partition_dataset, read_dataset, PrivateExample, Subset};
pub use template::{
    builtin_templates, render_prompt, PromptTemplate, SlotMap, TemplateError, TemplateKind, TemplatePair,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PipelineError {
    #[error("insufficient data{}: need {needed}, only {available} available", label.as_ref().map(|l| format!(" for label {l:?}")).unwrap_or_default())]
    InsufficientData {
        label: Option<String>,
        needed: usize,
        available: usize,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("privacy policy violation: {0}")]
    Policy(String),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Accounting(#[from] AccountingError),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error("{source}")]
    Provider {
        source: ProviderError,
        /// Trace up to the failing step, when the failure happened mid-generation.
        partial: Option<Box<GenerationTrace>>,
    },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl From<ProviderError> for PipelineError {
    fn from(source: ProviderError) -> Self {
        PipelineError::Provider { source, partial: None }
    }
}

/// One charged step of a generation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub temperature: f64,
    /// `None` in non-private mode.
    pub epsilon_charged: Option<f64>,
    /// Tokens in the output after this step (an `<eos>` step adds none).
    pub emitted: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub subset_id: String,
    pub seed: u64,
    pub steps: Vec<TraceStep>,
    pub report: Option<AccountantReport>,
    pub terminated_by_eos: bool,
    pub truncated: bool,
}

/// A generated example. `tokens` never contains `<eos>`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticRecord {
    pub tokens: Vec<TokenId>,
    pub text: String,
    pub label: String,
    /// Hit the `T`-token cap without sampling `<eos>`.
    pub truncated: bool,
    pub trace: GenerationTrace,
}

/// What the observer sees at every step.
#[derive(Debug)]
pub struct StepObservation<'a> {
    pub step: usize,
    pub blended: &'a LogitVector,
    pub distribution: &'a TokenDistribution,
    pub token: TokenId,
}

/// One planned corpus entry: a label, its subset, and its seed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusJob {
    pub index: usize,
    pub label: String,
    pub members: Vec<usize>,
    pub seed: u64,
}

impl CorpusJob {
    pub fn subset_id(&self) -> String {
        format!("subset-{:05}", self.index)
    }
}

pub struct Generator<'a, P: LogitProvider + ?Sized> {
    provider: &'a P,
    templates: TemplatePair,
    plan: SamplingPlan,
    extras: SlotMap,
    parallel: bool,
}

impl<'a, P: LogitProvider + ?Sized> Generator<'a, P> {
    pub fn new(provider: &'a P, templates: TemplatePair, mode: PrivacyMode) -> Result<Self, PipelineError> {
        let plan = mode.plan()?;
        Ok(Self {
            provider,
            templates,
            plan,
            extras: SlotMap::new(),
            parallel: false,
        })
    }

    pub fn with_extras(mut self, extras: SlotMap) -> Self {
        self.extras = extras;
        self
    }

    /// Query the `s + 1` sessions of a step, and the examples of a corpus, concurrently.
    pub fn with_parallel(mut self, parallel: bool) -> Self {
        self.parallel = parallel;
        self
    }

    pub fn plan(&self) -> &SamplingPlan {
        &self.plan
    }

    pub fn generate_example(
        &self,
        subset: &[PrivateExample],
        label: &str,
        seed: u64,
        subset_id: &str,
    ) -> Result<SyntheticRecord, PipelineError> {
        self.generate_example_observed(subset, label, seed, subset_id, &mut |_| {})
    }

    pub fn generate_example_observed(
        &self,
        subset: &[PrivateExample],
        label: &str,
        seed: u64,
        subset_id: &str,
        observer: &mut dyn FnMut(&StepObservation<'_>),
    ) -> Result<SyntheticRecord, PipelineError> {
        let s = self.plan.subset_size;
        let c = self.plan.clip_bound;
        let tau = self.plan.temperature;
        if subset.len() < s {
            return Err(PipelineError::InsufficientData {
                label: Some(label.to_string()),
                needed: s,
                available: subset.len(),
            });
        }
        if subset.len() > s {
            return Err(PipelineError::InvalidInput(format!(
                "subset has {} examples, expected exactly {s}",
                subset.len()
            )));
        }
        for e in subset {
            e.validate()?;
        }

        let provider = self.provider;
        let public_prompt = render_prompt(&self.templates.public, label, None, &self.extras)?;
        if let Some(e) = subset.iter().find(|e| public_prompt.contains(e.text.as_str())) {
            return Err(PipelineError::Policy(format!(
                "public prompt contains the text of a private example ({} bytes)",
                e.text.len()
            )));
        }
        let mut private_sessions = subset
            .iter()
            .map(|e| {
                let prompt = render_prompt(&self.templates.private, label, Some(e), &self.extras)?;
                Ok(provider.open_session(&provider.tokenize(&prompt)?)?)
            })
            .collect::<Result<Vec<ProviderSession>, PipelineError>>()?;
        let mut public_session = provider.open_session(&provider.tokenize(&public_prompt)?)?;

        let eos = provider.eos_token();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ledger = BudgetLedger::for_plan(&self.plan)?;
        let mut trace = GenerationTrace {
            subset_id: subset_id.to_string(),
            seed,
            steps: Vec::new(),
            report: self.plan.report,
            terminated_by_eos: false,
            truncated: false,
        };
        let mut tokens: Vec<TokenId> = Vec::new();
        let fail = |source: ProviderError, trace: &GenerationTrace| PipelineError::Provider {
            source,
            partial: Some(Box::new(trace.clone())),
        };

        while ledger.remaining() > 0 {
            let private_logits = if self.parallel {
                private_sessions
                    .par_iter_mut()
                    .map(|session| provider.next_logits(session))
                    .collect::<Result<Vec<_>, _>>()
            } else {
                private_sessions
                    .iter_mut()
                    .map(|session| provider.next_logits(session))
                    .collect::<Result<Vec<_>, _>>()
            }
            .map_err(|e| fail(e, &trace))?;
            let public_logits = provider
                .next_logits(&mut public_session)
                .map_err(|e| fail(e, &trace))?;

            let private_mean = aggregate_private(&private_logits, c, s)?;
            let public_clipped = clip_logits(&public_logits, c)?;
            let blended = blend(&private_mean, &public_clipped)?;
            let distribution = token_distribution(&blended, tau)?;
            let token = distribution.sample(&mut rng);
            ledger.charge()?;

            let is_eos = token == eos;
            trace.steps.push(TraceStep {
                temperature: tau,
                epsilon_charged: ledger.per_token_epsilon(),
                emitted: tokens.len() + usize::from(!is_eos),
            });
            observer(&StepObservation {
                step: trace.steps.len() - 1,
                blended: &blended,
                distribution: &distribution,
                token,
            });
            if is_eos {
                trace.terminated_by_eos = true;
                break;
            }
            tokens.push(token);
            if ledger.remaining() == 0 {
                break;
            }
            for session in private_sessions.iter_mut().chain(std::iter::once(&mut public_session)) {
                provider.append_token(session, token).map_err(|e| fail(e, &trace))?;
            }
        }
        trace.truncated = !trace.terminated_by_eos;
        for session in private_sessions.iter_mut().chain(std::iter::once(&mut public_session)) {
            provider.close_session(session);
        }
        let text = provider.decode(&tokens).map_err(|e| fail(e, &trace))?;
        Ok(SyntheticRecord {
            tokens,
            text,
            label: label.to_string(),
            truncated: trace.truncated,
            trace,
        })
    }

    /// Assign a disjoint subset and a seed to every requested example.
    ///
    /// `requests` lists `(label, count)` pairs. With `per_label`, subsets for a
    /// label come from that label's examples only; otherwise all requests draw
    /// from one shared pool. Subsets are never reused.
    pub fn plan_corpus(
        &self,
        data: &[PrivateExample],
        requests: &[(String, usize)],
        per_label: bool,
        master_seed: u64,
    ) -> Result<Vec<CorpusJob>, PipelineError> {
        plan_corpus(data, requests, self.plan.subset_size, per_label, master_seed)
    }

    pub fn generate_corpus(
        &self,
        data: &[PrivateExample],
        requests: &[(String, usize)],
        per_label: bool,
        master_seed: u64,
    ) -> Result<Vec<SyntheticRecord>, PipelineError> {
        let jobs = self.plan_corpus(data, requests, per_label, master_seed)?;
        let run = |job: &CorpusJob| {
            let subset: Vec<PrivateExample> = job.members.iter().map(|&i| data[i].clone()).collect();
            self.generate_example(&subset, &job.label, job.seed, &job.subset_id())
        };
        if self.parallel {
            jobs.par_iter().map(run).collect()
        } else {
            jobs.iter().map(run).collect()
        }
    }
}

/// See [`Generator::plan_corpus`].
pub fn plan_corpus(
    data: &[PrivateExample],
    requests: &[(String, usize)],
    s: usize,
    per_label: bool,
    master_seed: u64,
) -> Result<Vec<CorpusJob>, PipelineError> {
    let total: usize = requests.iter().map(|(_, n)| n).sum();
    if total == 0 {
        return Ok(Vec::new());
    }
    for e in data {
        e.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, 0));
    let mut available: std::collections::BTreeMap<Option<String>, std::collections::VecDeque<Vec<usize>>> =
        Default::default();
    if data.len() >= s {
        for subset in partition_dataset(data, s, per_label, &mut rng)? {
            available.entry(subset.label).or_default().push_back(subset.members);
        }
    }

    let mut jobs = Vec::with_capacity(total);
    for (label, count) in requests {
        let key = per_label.then(|| label.clone());
        let queue = available.entry(key).or_default();
        if queue.len() < *count {
            let pool_size = if per_label {
                data.iter().filter(|e| &e.label == label).count()
            } else {
                data.len()
            };
            return Err(PipelineError::InsufficientData {
                label: Some(label.clone()),
                needed: count * s,
                available: if per_label {
                    pool_size
                } else {
                    queue.len() * s
                },
            });
        }
        for _ in 0..*count {
            let members = queue.pop_front().expect("length checked above");
            let index = jobs.len();
            jobs.push(CorpusJob {
                index,
                label: label.clone(),
                members,
                seed: derive_seed(master_seed, index as u64 + 1),
            });
        }
    }
    Ok(jobs)
}
