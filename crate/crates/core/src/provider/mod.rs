//! Full-vocabulary next-token logit providers.
//!
//! A provider owns tokenization and exposes prefix sessions: a session is
//! opened on a prompt, queried for the next-position logits, and extended one
//! token at a time. Logits are cached per position, so a generation of `n`
//! tokens costs `n` model steps per session.

mod remote;
mod toy;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use thiserror::Error;

use crate::mechanism::{token_distribution, LogitVector, MechanismError, TokenId};

pub use remote::{RemoteEndpointConfig, RemoteProvider};
pub use toy::{ToyModel, ToyModelSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProviderError {
    #[error("transport error: {0}")]
    Transport(String),
    #[error("encoding error: {0}")]
    Encoding(String),
    #[error("session state error: {0}")]
    State(String),
    #[error("provider contract violation: {0}")]
    ContractViolation(String),
    #[error("toy model spec error at line {line}: {message}")]
    Spec { line: usize, message: String },
    #[error("provider configuration error: {0}")]
    Config(String),
}

static NEXT_SESSION_ID: AtomicU64 = AtomicU64::new(1);

/// A prefix session. Single owner; distinct sessions may advance in parallel.
#[derive(Debug, Clone)]
pub struct ProviderSession {
    id: u64,
    prefix: Vec<TokenId>,
    vocab_size: usize,
    cached: Option<LogitVector>,
    closed: bool,
}

impl ProviderSession {
    fn new(prefix: Vec<TokenId>, vocab_size: usize) -> Self {
        Self {
            id: NEXT_SESSION_ID.fetch_add(1, Ordering::Relaxed),
            prefix,
            vocab_size,
            cached: None,
            closed: false,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn prefix(&self) -> &[TokenId] {
        &self.prefix
    }

    pub fn position(&self) -> usize {
        self.prefix.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }
}

pub trait LogitProvider: Send + Sync {
    fn vocab_size(&self) -> usize;

    fn eos_token(&self) -> TokenId;

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ProviderError>;

    fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError>;

    /// Raw next-token logits for the session's prefix. Called at most once per
    /// position; [`LogitProvider::next_logits`] validates and caches the result.
    fn compute_logits(&self, session: &ProviderSession) -> Result<Vec<f64>, ProviderError>;

    fn open_session(&self, prompt: &[TokenId]) -> Result<ProviderSession, ProviderError> {
        check_tokens(prompt, self.vocab_size())?;
        Ok(ProviderSession::new(prompt.to_vec(), self.vocab_size()))
    }

    fn next_logits(&self, session: &mut ProviderSession) -> Result<LogitVector, ProviderError> {
        if session.closed {
            return Err(ProviderError::State(format!("session {} is closed", session.id)));
        }
        if let Some(cached) = &session.cached {
            return Ok(cached.clone());
        }
        let raw = self.compute_logits(session)?;
        if raw.len() != session.vocab_size {
            return Err(ProviderError::ContractViolation(format!(
                "expected {} logits (full vocabulary), received {}",
                session.vocab_size,
                raw.len()
            )));
        }
        let logits = LogitVector::new(raw).map_err(|e| match e {
            MechanismError::InvalidInput(msg) => ProviderError::ContractViolation(msg),
            other => ProviderError::ContractViolation(other.to_string()),
        })?;
        session.cached = Some(logits.clone());
        Ok(logits)
    }

    fn append_token(&self, session: &mut ProviderSession, token: TokenId) -> Result<(), ProviderError> {
        if session.closed {
            return Err(ProviderError::State(format!("session {} is closed", session.id)));
        }
        check_tokens(&[token], session.vocab_size)?;
        session.prefix.push(token);
        session.cached = None;
        Ok(())
    }

    fn close_session(&self, session: &mut ProviderSession) {
        session.closed = true;
        session.cached = None;
    }
}

fn check_tokens(tokens: &[TokenId], vocab_size: usize) -> Result<(), ProviderError> {
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
        return Err(ProviderError::Encoding(format!(
            "token index {t} outside vocabulary of size {vocab_size}"
        )));
    }
    Ok(())
}

/// Either provider, selected at run time.
pub enum AnyProvider {
    Toy(ToyModel),
    Remote(RemoteProvider),
}

impl LogitProvider for AnyProvider {
    fn vocab_size(&self) -> usize {
        match self {
            AnyProvider::Toy(p) => p.vocab_size(),
            AnyProvider::Remote(p) => p.vocab_size(),
        }
    }

    fn eos_token(&self) -> TokenId {
        match self {
            AnyProvider::Toy(p) => p.eos_token(),
            AnyProvider::Remote(p) => p.eos_token(),
        }
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        match self {
            AnyProvider::Toy(p) => p.tokenize(text),
            AnyProvider::Remote(p) => p.tokenize(text),
        }
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError> {
        match self {
            AnyProvider::Toy(p) => p.decode(tokens),
            AnyProvider::Remote(p) => p.decode(tokens),
        }
    }

    fn compute_logits(&self, session: &ProviderSession) -> Result<Vec<f64>, ProviderError> {
        match self {
            AnyProvider::Toy(p) => p.compute_logits(session),
            AnyProvider::Remote(p) => p.compute_logits(session),
        }
    }
}

/// Plain (non-private) decoding of a single prompt.
///
/// `temperature = None` decodes greedily (lowest index wins ties). Stops at
/// `<eos>`, after `max_tokens` tokens, or when `stop_at_newline` is set and
/// the decoded continuation contains a newline. Returns the emitted tokens,
/// excluding `<eos>`.
pub fn decode_plain<P, R>(
    provider: &P,
    prompt: &[TokenId],
    temperature: Option<f64>,
    max_tokens: usize,
    stop_at_newline: bool,
    rng: &mut R,
) -> Result<Vec<TokenId>, ProviderError>
where
    P: LogitProvider + ?Sized,
    R: Rng + ?Sized,
{
    let mut session = provider.open_session(prompt)?;
    let eos = provider.eos_token();
    let mut out = Vec::new();
    for _ in 0..max_tokens {
        let logits = provider.next_logits(&mut session)?;
        let token = match temperature {
            None => logits.argmax() as TokenId,
            Some(tau) => token_distribution(&logits, tau)
                .map_err(|e| ProviderError::Config(e.to_string()))?
                .sample(rng),
        };
        if token == eos {
            break;
        }
        out.push(token);
        if stop_at_newline && provider.decode(&[token])?.contains('\n') {
            break;
        }
        provider.append_token(&mut session, token)?;
    }
    provider.close_session(&mut session);
    Ok(out)
}

/// `log P(continuation | prompt)` under the raw model at temperature 1.
pub fn continuation_log_likelihood<P>(
    provider: &P,
    prompt: &[TokenId],
    continuation: &[TokenId],
) -> Result<f64, ProviderError>
where
    P: LogitProvider + ?Sized,
{
    let mut session = provider.open_session(prompt)?;
    let mut total = 0.0;
    for &token in continuation {
        let logits = provider.next_logits(&mut session)?;
        let dist = token_distribution(&logits, 1.0).map_err(|e| ProviderError::Config(e.to_string()))?;
        total += dist
            .log_probs()
            .get(token as usize)
            .copied()
            .ok_or_else(|| ProviderError::Encoding(format!("token index {token} outside vocabulary")))?;
        provider.append_token(&mut session, token)?;
    }
    provider.close_session(&mut session);
    Ok(total)
}
