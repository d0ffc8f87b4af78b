//! HTTP client for a remote logit server.
//!
//! All endpoints are `POST` with JSON bodies, relative to `base_url`:
//!
//! | path          | request                                        | response                          |
//! |---------------|------------------------------------------------|-----------------------------------|
//! | `/info`       | `{"model"}`                                    | `{"vocab_size", "eos_token"}`     |
//! | `/tokenize`   | `{"model", "text"}`                            | `{"tokens": [u32]}`               |
//! | `/detokenize` | `{"model", "tokens"}`                          | `{"text"}`                        |
//! | `/logits`     | `{"model", "session", "tokens"}`               | `{"logits": [f64; V]}`            |
//!
//! `/logits` carries the session id and its full token list; a server can key
//! its prefix cache on the id and only run the newly appended token. The
//! response must hold exactly `V` logits: the client never pads or truncates.

use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use ureq::Agent;

use super::{LogitProvider, ProviderError, ProviderSession};
use crate::mechanism::TokenId;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemoteEndpointConfig {
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
    #[serde(default, skip_serializing)]
    pub auth_token: Option<String>,
}

fn default_timeout_ms() -> u64 {
    30_000
}

fn default_max_retries() -> u32 {
    3
}

fn default_backoff_ms() -> u64 {
    200
}

fn default_max_backoff_ms() -> u64 {
    5_000
}

impl RemoteEndpointConfig {
    pub fn new(base_url: impl Into<String>, model_name: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model_name: model_name.into(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_max_retries(),
            initial_backoff_ms: default_backoff_ms(),
            max_backoff_ms: default_max_backoff_ms(),
            auth_token: None,
        }
    }

    fn validate(&self) -> Result<(), ProviderError> {
        if self.timeout_ms == 0 {
            return Err(ProviderError::Config("timeout must be positive".into()));
        }
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(ProviderError::Config(format!(
                "base_url must be an http(s) URL, got {:?}",
                self.base_url
            )));
        }
        Ok(())
    }

    /// Delay before retry number `attempt` (1-based): doubling, capped at `max_backoff_ms`.
    pub fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64.checked_shl(attempt.saturating_sub(1)).unwrap_or(u64::MAX);
        Duration::from_millis(self.initial_backoff_ms.saturating_mul(factor).min(self.max_backoff_ms))
    }
}

#[derive(Serialize)]
struct InfoRequest<'a> {
    model: &'a str,
}

#[derive(Deserialize)]
struct InfoResponse {
    vocab_size: usize,
    eos_token: TokenId,
}

#[derive(Serialize)]
struct TokenizeRequest<'a> {
    model: &'a str,
    text: &'a str,
}

#[derive(Deserialize)]
struct TokenizeResponse {
    tokens: Vec<TokenId>,
}

#[derive(Serialize)]
struct DetokenizeRequest<'a> {
    model: &'a str,
    tokens: &'a [TokenId],
}

#[derive(Deserialize)]
struct DetokenizeResponse {
    text: String,
}

#[derive(Serialize)]
struct LogitsRequest<'a> {
    model: &'a str,
    session: String,
    tokens: &'a [TokenId],
}

#[derive(Deserialize)]
struct LogitsResponse {
    logits: Vec<f64>,
}

/// Remote provider. `Sync`: any number of sessions may be in flight concurrently.
pub struct RemoteProvider {
    config: RemoteEndpointConfig,
    agent: Agent,
    vocab_size: usize,
    eos: TokenId,
}

impl std::fmt::Debug for RemoteProvider {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteProvider")
            .field("base_url", &self.config.base_url)
            .field("model_name", &self.config.model_name)
            .field("vocab_size", &self.vocab_size)
            .finish()
    }
}

impl RemoteProvider {
    /// Connects and fetches the vocabulary size and `<eos>` id from `/info`.
    pub fn connect(config: RemoteEndpointConfig) -> Result<Self, ProviderError> {
        config.validate()?;
        let agent: Agent = Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        let mut provider = Self {
            config,
            agent,
            vocab_size: 0,
            eos: 0,
        };
        let info: InfoResponse = provider.post(
            "info",
            &InfoRequest {
                model: &provider.config.model_name,
            },
        )?;
        if info.vocab_size == 0 || info.eos_token as usize >= info.vocab_size {
            return Err(ProviderError::ContractViolation(format!(
                "server reported vocab_size {} with eos_token {}",
                info.vocab_size, info.eos_token
            )));
        }
        provider.vocab_size = info.vocab_size;
        provider.eos = info.eos_token;
        Ok(provider)
    }

    pub fn config(&self) -> &RemoteEndpointConfig {
        &self.config
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{}", self.config.base_url.trim_end_matches('/'), path)
    }

    /// POST with retries. Connection failures, timeouts and 5xx/429 responses
    /// are retried; other 4xx responses and malformed bodies fail immediately.
    fn post<Req: Serialize, Resp: for<'de> Deserialize<'de>>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp, ProviderError> {
        let url = self.url(path);
        let mut last_error = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                thread::sleep(self.config.backoff(attempt));
            }
            let mut request = self.agent.post(&url);
            if let Some(token) = &self.config.auth_token {
                request = request.header("Authorization", &format!("Bearer {token}"));
            }
            match request.send_json(body) {
                Ok(mut response) => {
                    let status = response.status().as_u16();
                    if status == 200 {
                        return response.body_mut().read_json::<Resp>().map_err(|e| {
                            ProviderError::ContractViolation(format!("malformed response from {url}: {e}"))
                        });
                    }
                    let detail = response.body_mut().read_to_string().unwrap_or_default();
                    if status == 429 || status >= 500 {
                        last_error = format!("HTTP {status} from {url}: {detail}");
                        continue;
                    }
                    return Err(ProviderError::Transport(format!("HTTP {status} from {url}: {detail}")));
                }
                Err(e) => last_error = format!("{url}: {e}"),
            }
        }
        Err(ProviderError::Transport(format!(
            "giving up after {} attempts: {last_error}",
            self.config.max_retries + 1
        )))
    }
}

impl LogitProvider for RemoteProvider {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn eos_token(&self) -> TokenId {
        self.eos
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        let resp: TokenizeResponse = self.post(
            "tokenize",
            &TokenizeRequest {
                model: &self.config.model_name,
                text,
            },
        )?;
        if let Some(&t) = resp.tokens.iter().find(|&&t| t as usize >= self.vocab_size) {
            return Err(ProviderError::Encoding(format!(
                "server tokenizer returned index {t} outside vocabulary of size {}",
                self.vocab_size
            )));
        }
        Ok(resp.tokens)
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError> {
        let resp: DetokenizeResponse = self.post(
            "detokenize",
            &DetokenizeRequest {
                model: &self.config.model_name,
                tokens,
            },
        )?;
        Ok(resp.text)
    }

    fn compute_logits(&self, session: &ProviderSession) -> Result<Vec<f64>, ProviderError> {
        let resp: LogitsResponse = self.post(
            "logits",
            &LogitsRequest {
                model: &self.config.model_name,
                session: format!("s{}", session.id()),
                tokens: session.prefix(),
            },
        )?;
        Ok(resp.logits)
    }
}
