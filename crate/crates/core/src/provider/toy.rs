//! Deterministic toy language model.
//!
//! Next-token logits are the sum of two parts:
//!
//! * an order-`k` (`k <= 3`) transition table, looked up with the longest
//!   suffix of the prefix that has a row (backing off to shorter contexts);
//!   contexts with no row at any length get pseudo-random logits derived
//!   from the fallback seed and the last `k` tokens;
//! * an optional copy head: it finds the earlier positions whose preceding
//!   tokens match the current suffix for the longest length `L`
//!   (`L <= copy_max_match`) and adds `copy_weight * L` to each token that
//!   followed such a position. This lets the model repeat text that appears
//!   in its prompt, which is what makes prompt leakage observable.
//!
//! Tokenization is greedy longest-match over the vocabulary strings. With a
//! character vocabulary this is plain character-level tokenization.
//!
//! Table file format (UTF-8, one entry per line, `#` comments):
//!
//! ```text
//! @vocab<TAB>tok tok tok ...          or   @vocab_preset<TAB>printable_ascii
//! @eos<TAB><eos>
//! @order<TAB>2
//! @fallback<TAB><seed> <scale>
//! @copy<TAB><weight> <max_match>
//! <context tokens, space separated><TAB><V space-separated logits>
//! ```
//!
//! Tokens are escaped: `\s` space, `\t` tab, `\n` newline, `\\` backslash,
//! and a leading `@` or `#` is written `\@` / `\#`. An empty context field is
//! the root (order-0) row.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LogitProvider, ProviderError, ProviderSession};
use crate::mechanism::TokenId;

pub const MAX_ORDER: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModelSpec {
    vocab: Vec<String>,
    eos: TokenId,
    order: usize,
    table: HashMap<Vec<TokenId>, Vec<f64>>,
    fallback_seed: u64,
    fallback_scale: f64,
    copy_weight: f64,
    copy_max_match: usize,
}

fn spec_err(line: usize, message: impl Into<String>) -> ProviderError {
    ProviderError::Spec {
        line,
        message: message.into(),
    }
}

impl ToyModelSpec {
    pub fn new(vocab: Vec<String>, eos: &str, order: usize) -> Result<Self, ProviderError> {
        if order > MAX_ORDER {
            return Err(ProviderError::Config(format!(
                "toy model order {order} exceeds the maximum of {MAX_ORDER}"
            )));
        }
        if vocab.iter().any(|t| t.is_empty()) {
            return Err(ProviderError::Config("vocabulary contains an empty token".into()));
        }
        let mut seen = BTreeSet::new();
        for t in &vocab {
            if !seen.insert(t.as_str()) {
                return Err(ProviderError::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        let eos = vocab
            .iter()
            .position(|t| t == eos)
            .ok_or_else(|| ProviderError::Config(format!("end-of-sequence token {eos:?} not in vocabulary")))?
            as TokenId;
        Ok(Self {
            vocab,
            eos,
            order,
            table: HashMap::new(),
            fallback_seed: 0,
            fallback_scale: 1.0,
            copy_weight: 0.0,
            copy_max_match: 0,
        })
    }

    /// Printable ASCII characters, newline, then `<eos>` (97 tokens).
    pub fn printable_ascii_vocab() -> Vec<String> {
        let mut vocab: Vec<String> = (0x20u8..=0x7e).map(|b| (b as char).to_string()).collect();
        vocab.push("\n".into());
        vocab.push("<eos>".into());
        vocab
    }

    pub fn with_row(mut self, context: &[TokenId], logits: Vec<f64>) -> Result<Self, ProviderError> {
        self.insert_row(context.to_vec(), logits)?;
        Ok(self)
    }

    /// Row keyed by the tokenization of `context`.
    pub fn with_text_row(self, context: &str, logits: Vec<f64>) -> Result<Self, ProviderError> {
        let tokens = self.tokenize(context)?;
        self.with_row(&tokens, logits)
    }

    pub fn with_fallback(mut self, seed: u64, scale: f64) -> Result<Self, ProviderError> {
        if !(scale.is_finite() && scale >= 0.0) {
            return Err(ProviderError::Config(format!("fallback scale must be finite and >= 0, got {scale}")));
        }
        self.fallback_seed = seed;
        self.fallback_scale = scale;
        Ok(self)
    }

    pub fn with_copy(mut self, weight: f64, max_match: usize) -> Result<Self, ProviderError> {
        if !(weight.is_finite() && weight >= 0.0) {
            return Err(ProviderError::Config(format!("copy weight must be finite and >= 0, got {weight}")));
        }
        self.copy_weight = weight;
        self.copy_max_match = max_match;
        Ok(self)
    }

    fn insert_row(&mut self, context: Vec<TokenId>, logits: Vec<f64>) -> Result<(), ProviderError> {
        if context.len() > self.order {
            return Err(ProviderError::Config(format!(
                "context of length {} exceeds model order {}",
                context.len(),
                self.order
            )));
        }
        if let Some(&t) = context.iter().find(|&&t| t as usize >= self.vocab.len()) {
            return Err(ProviderError::Encoding(format!("context token {t} outside vocabulary")));
        }
        if logits.len() != self.vocab.len() {
            return Err(ProviderError::Config(format!(
                "table row has {} logits, vocabulary has {}",
                logits.len(),
                self.vocab.len()
            )));
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(ProviderError::Config("table row contains a non-finite logit".into()));
        }
        self.table.insert(context, logits);
        Ok(())
    }

    pub fn vocab(&self) -> &[String] {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn eos_token(&self) -> TokenId {
        self.eos
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn row(&self, context: &[TokenId]) -> Option<&[f64]> {
        self.table.get(context).map(Vec::as_slice)
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        let max_len = self.vocab.iter().map(|t| t.len()).max().unwrap_or(0);
        let index: HashMap<&str, TokenId> = self
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.as_str(), i as TokenId))
            .collect();
        let mut out = Vec::new();
        let mut pos = 0;
        'outer: while pos < text.len() {
            let rest = &text[pos..];
            let mut len = max_len.min(rest.len());
            while len > 0 {
                if rest.is_char_boundary(len) {
                    if let Some(&id) = index.get(&rest[..len]) {
                        out.push(id);
                        pos += len;
                        continue 'outer;
                    }
                }
                len -= 1;
            }
            let ch = rest.chars().next().unwrap_or_default();
            return Err(ProviderError::Encoding(format!(
                "character {ch:?} at byte {pos} is not in the toy vocabulary"
            )));
        }
        Ok(out)
    }

    pub fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError> {
        let mut out = String::new();
        for &t in tokens {
            let s = self
                .vocab
                .get(t as usize)
                .ok_or_else(|| ProviderError::Encoding(format!("token index {t} outside vocabulary")))?;
            out.push_str(s);
        }
        Ok(out)
    }

    /// Logits for the position after `prefix`. A pure function of `(self, prefix)`.
    pub fn logits_for(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut logits = self.table_logits(prefix);
        if self.copy_weight > 0.0 && self.copy_max_match > 0 {
            if let Some((len, tokens)) = self.copy_matches(prefix) {
                let boost = self.copy_weight * len as f64;
                for t in tokens {
                    logits[t as usize] += boost;
                }
            }
        }
        logits
    }

    fn table_logits(&self, prefix: &[TokenId]) -> Vec<f64> {
        let window = self.order.min(prefix.len());
        for len in (0..=window).rev() {
            if let Some(row) = self.table.get(&prefix[prefix.len() - len..]) {
                return row.clone();
            }
        }
        self.fallback_logits(&prefix[prefix.len() - window..])
    }

    fn fallback_logits(&self, context: &[TokenId]) -> Vec<f64> {
        // FNV-1a over the seed and the context; stable across platforms and releases.
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(&self.fallback_seed.to_le_bytes());
        feed(&(context.len() as u64).to_le_bytes());
        for t in context {
            feed(&t.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(hash);
        (0..self.vocab.len())
            .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * self.fallback_scale)
            .collect()
    }

    /// Longest suffix match against earlier positions and the tokens that followed it.
    fn copy_matches(&self, prefix: &[TokenId]) -> Option<(usize, BTreeSet<TokenId>)> {
        let n = prefix.len();
        let mut best = 0usize;
        let mut followers = BTreeSet::new();
        // Position j is a candidate continuation: prefix[j] followed prefix[..j].
        for j in 1..n {
            let limit = self.copy_max_match.min(j);
            let mut len = 0;
            while len < limit && prefix[j - 1 - len] == prefix[n - 1 - len] {
                len += 1;
            }
            if len == 0 {
                continue;
            }
            if len > best {
                best = len;
                followers.clear();
            }
            if len == best {
                followers.insert(prefix[j]);
            }
        }
        (best > 0).then_some((best, followers))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ProviderError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProviderError::Config(format!("cannot read toy model spec {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, ProviderError> {
        let mut vocab: Option<Vec<String>> = None;
        let mut eos: Option<String> = None;
        let mut order: Option<usize> = None;
        let mut fallback = (0u64, 1.0f64);
        let mut copy = (0.0f64, 0usize);
        let mut rows: Vec<(usize, Vec<String>, Vec<f64>)> = Vec::new();

        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            if raw.trim().is_empty() || raw.starts_with('#') {
                continue;
            }
            let (key, value) = raw
                .split_once('\t')
                .ok_or_else(|| spec_err(line_no, "expected a TAB separating key/context from value"))?;
            if let Some(header) = key.strip_prefix('@') {
                match header {
                    "vocab" => {
                        let toks = value
                            .split(' ')
                            .map(unescape_token)
                            .collect::<Result<Vec<_>, _>>()
                            .map_err(|m| spec_err(line_no, m))?;
                        vocab = Some(toks);
                    }
                    "vocab_preset" => match value.trim() {
                        "printable_ascii" => vocab = Some(Self::printable_ascii_vocab()),
                        other => return Err(spec_err(line_no, format!("unknown vocabulary preset {other:?}"))),
                    },
                    "eos" => eos = Some(unescape_token(value).map_err(|m| spec_err(line_no, m))?),
                    "order" => {
                        order = Some(
                            value
                                .trim()
                                .parse()
                                .map_err(|_| spec_err(line_no, format!("invalid order {value:?}")))?,
                        )
                    }
                    "fallback" => {
                        let mut parts = value.split_whitespace();
                        let seed = parts.next().and_then(|p| p.parse().ok());
                        let scale = parts.next().and_then(|p| p.parse().ok());
                        match (seed, scale, parts.next()) {
                            (Some(seed), Some(scale), None) => fallback = (seed, scale),
                            _ => return Err(spec_err(line_no, "expected `@fallback<TAB><seed> <scale>`")),
                        }
                    }
                    "copy" => {
                        let mut parts = value.split_whitespace();
                        let weight = parts.next().and_then(|p| p.parse().ok());
                        let max_match = parts.next().and_then(|p| p.parse().ok());
                        match (weight, max_match, parts.next()) {
                            (Some(w), Some(m), None) => copy = (w, m),
                            _ => return Err(spec_err(line_no, "expected `@copy<TAB><weight> <max_match>`")),
                        }
                    }
                    other => return Err(spec_err(line_no, format!("unknown header @{other}"))),
                }
                continue;
            }
            let context = if key.is_empty() {
                Vec::new()
            } else {
                key.split(' ')
                    .map(unescape_token)
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|m| spec_err(line_no, m))?
            };
            let logits = value
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| spec_err(line_no, format!("invalid logit: {e}")))?;
            rows.push((line_no, context, logits));
        }

        let vocab = vocab.ok_or_else(|| spec_err(0, "missing @vocab or @vocab_preset header"))?;
        let eos = eos.ok_or_else(|| spec_err(0, "missing @eos header"))?;
        let order = order.ok_or_else(|| spec_err(0, "missing @order header"))?;
        let mut spec = Self::new(vocab, &eos, order)
            .and_then(|s| s.with_fallback(fallback.0, fallback.1))
            .and_then(|s| s.with_copy(copy.0, copy.1))
            .map_err(|e| spec_err(0, e.to_string()))?;
        let index: HashMap<String, TokenId> = spec
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as TokenId))
            .collect();
        for (line_no, context, logits) in rows {
            let ctx = context
                .iter()
                .map(|t| {
                    index
                        .get(t)
                        .copied()
                        .ok_or_else(|| spec_err(line_no, format!("context token {t:?} not in vocabulary")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            spec.insert_row(ctx, logits).map_err(|e| spec_err(line_no, e.to_string()))?;
        }
        Ok(spec)
    }

    /// Serialize to the table file format. Rows are written in sorted context order.
    pub fn to_table_string(&self) -> String {
        let mut out = String::new();
        let vocab: Vec<String> = self.vocab.iter().map(|t| escape_token(t)).collect();
        let _ = writeln!(out, "@vocab\t{}", vocab.join(" "));
        let _ = writeln!(out, "@eos\t{}", escape_token(&self.vocab[self.eos as usize]));
        let _ = writeln!(out, "@order\t{}", self.order);
        let _ = writeln!(out, "@fallback\t{} {}", self.fallback_seed, self.fallback_scale);
        let _ = writeln!(out, "@copy\t{} {}", self.copy_weight, self.copy_max_match);
        let mut contexts: Vec<&Vec<TokenId>> = self.table.keys().collect();
        contexts.sort();
        for ctx in contexts {
            let key: Vec<String> = ctx
                .iter()
                .map(|&t| escape_token(&self.vocab[t as usize]))
                .collect();
            let row: Vec<String> = self.table[ctx].iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(out, "{}\t{}", key.join(" "), row.join(" "));
        }
        out
    }
}

fn escape_token(token: &str) -> String {
    let mut out = String::new();
    for (i, ch) in token.chars().enumerate() {
        match ch {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '@' | '#' if i == 0 => {
                out.push('\\');
                out.push(ch);
            }
            _ => out.push(ch),
        }
    }
    out
}

fn unescape_token(raw: &str) -> Result<String, String> {
    if raw.is_empty() {
        return Err("empty token".into());
    }
    let mut out = String::new();
    let mut chars = raw.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('s') => out.push(' '),
            Some('t') => out.push('\t'),
            Some('n') => out.push('\n'),
            Some('@') => out.push('@'),
            Some('#') => out.push('#'),
            other => return Err(format!("invalid escape in token {raw:?}: {other:?}")),
        }
    }
    Ok(out)
}

/// [`ToyModelSpec`] behind the [`LogitProvider`] interface.
#[derive(Debug, Clone)]
pub struct ToyModel {
    spec: ToyModelSpec,
}

impl ToyModel {
    pub fn new(spec: ToyModelSpec) -> Self {
        Self { spec }
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }
}

impl LogitProvider for ToyModel {
    fn vocab_size(&self) -> usize {
        self.spec.vocab_size()
    }

    fn eos_token(&self) -> TokenId {
        self.spec.eos
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>, ProviderError> {
        self.spec.tokenize(text)
    }

    fn decode(&self, tokens: &[TokenId]) -> Result<String, ProviderError> {
        self.spec.decode(tokens)
    }

    fn compute_logits(&self, session: &ProviderSession) -> Result<Vec<f64>, ProviderError> {
        Ok(self.spec.logits_for(session.prefix()))
    }
}
