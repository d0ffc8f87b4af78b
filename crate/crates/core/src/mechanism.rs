//! Per-token private prediction mechanism.
//!
//! Every private prompt yields a full-vocabulary logit vector. Each vector is
//! re-centred so that its maximum sits at `c` and floored at `-c`, the clipped
//! private vectors are averaged with a fixed divisor `s`, the average is
//! blended 50/50 with the clipped public vector, and the next token is drawn
//! from `softmax(blended / tau)`. That last step is the exponential mechanism
//! with utility `blended` and sensitivity `c / (2s)`.
//!
//! All functions here are pure. Randomness only enters through the caller's
//! `Rng` in [`sample_token`] / [`TokenDistribution::sample`].

use rand::Rng;
use thiserror::Error;

/// Token index into a provider vocabulary.
pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected vocabulary size {expected}, found {found}")]
    Dimension { expected: usize, found: usize },
}

/// Dense logit vector over a vocabulary. All entries are finite.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector {
    values: Vec<f64>,
}

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self, MechanismError> {
        if values.is_empty() {
            return Err(MechanismError::InvalidInput(
                "logit vector must have at least one entry".into(),
            ));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MechanismError::InvalidInput(format!(
                "logit entry {i} is not finite ({})",
                values[i]
            )));
        }
        Ok(Self { values })
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Largest entry.
    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Indices of every entry equal to the maximum.
    pub fn argmax_set(&self) -> Vec<usize> {
        argmax_set(&self.values)
    }

    /// Lowest index among the maximal entries.
    pub fn argmax(&self) -> usize {
        self.argmax_set()[0]
    }
}

/// Output of [`clip_logits`]: every entry lies in `[-c, c]` and the maximum is exactly `c`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClippedLogitVector {
    values: Vec<f64>,
    clip_bound: f64,
}

impl ClippedLogitVector {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn clip_bound(&self) -> f64 {
        self.clip_bound
    }

    pub fn vocab_size(&self) -> usize {
        self.values.len()
    }

    pub fn argmax_set(&self) -> Vec<usize> {
        argmax_set(&self.values)
    }

    pub fn into_logits(self) -> LogitVector {
        LogitVector {
            values: self.values,
        }
    }
}

fn argmax_set(values: &[f64]) -> Vec<usize> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v == max)
        .map(|(i, _)| i)
        .collect()
}

fn check_clip_bound(c: f64) -> Result<(), MechanismError> {
    if !(c.is_finite() && c > 0.0) {
        return Err(MechanismError::InvalidParameter(format!(
            "clip bound must be a positive finite number, got {c}"
        )));
    }
    Ok(())
}

/// `clip_c(z)_i = max(-c, z_i - max_j z_j + c)`.
///
/// The clipped value only depends on the maximum value, so ties in the
/// argmax need no tie-breaking.
pub fn clip_logits(z: &LogitVector, c: f64) -> Result<ClippedLogitVector, MechanismError> {
    check_clip_bound(c)?;
    let max = z.max_value();
    let values = z
        .values
        .iter()
        // (z - max) is exactly 0.0 at the argmax, so the maximum lands on c exactly.
        .map(|&v| f64::max(-c, (v - max) + c))
        .collect();
    Ok(ClippedLogitVector {
        values,
        clip_bound: c,
    })
}

/// Sensitivity of the blended aggregate: `c / (2s)`.
pub fn sensitivity(c: f64, s: usize) -> Result<f64, MechanismError> {
    check_clip_bound(c)?;
    if s == 0 {
        return Err(MechanismError::InvalidParameter(
            "subset size must be at least 1".into(),
        ));
    }
    Ok(c / (2.0 * s as f64))
}

/// Mean of the clipped private logits with the fixed divisor `s`.
///
/// `private` normally holds exactly `s` vectors. Fewer are accepted so the
/// add/remove neighbour of a full subset can be evaluated with the divisor
/// held at `s`; more than `s` is rejected because the result would leave
/// `[-c, c]`.
pub fn aggregate_private(
    private: &[LogitVector],
    c: f64,
    s: usize,
) -> Result<LogitVector, MechanismError> {
    check_clip_bound(c)?;
    if s == 0 {
        return Err(MechanismError::InvalidParameter(
            "subset size must be at least 1".into(),
        ));
    }
    let first = private.first().ok_or_else(|| {
        MechanismError::InvalidInput("cannot aggregate an empty set of logit vectors".into())
    })?;
    if private.len() > s {
        return Err(MechanismError::InvalidInput(format!(
            "received {} private logit vectors for subset size {s}",
            private.len()
        )));
    }
    let vocab = first.vocab_size();
    let mut sum = vec![0.0; vocab];
    for z in private {
        if z.vocab_size() != vocab {
            return Err(MechanismError::Dimension {
                expected: vocab,
                found: z.vocab_size(),
            });
        }
        let clipped = clip_logits(z, c)?;
        for (acc, v) in sum.iter_mut().zip(clipped.values()) {
            *acc += v;
        }
    }
    let divisor = s as f64;
    Ok(LogitVector {
        values: sum.into_iter().map(|v| v / divisor).collect(),
    })
}

/// Entrywise mean of the private aggregate and the clipped public logits.
pub fn blend(
    private_mean: &LogitVector,
    public: &ClippedLogitVector,
) -> Result<LogitVector, MechanismError> {
    if private_mean.vocab_size() != public.vocab_size() {
        return Err(MechanismError::Dimension {
            expected: private_mean.vocab_size(),
            found: public.vocab_size(),
        });
    }
    Ok(LogitVector {
        values: private_mean
            .values
            .iter()
            .zip(public.values())
            .map(|(a, b)| (a + b) / 2.0)
            .collect(),
    })
}

/// Exact next-token distribution `softmax(z / tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    temperature: f64,
}

impl TokenDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Log-probabilities computed directly from the log-sum-exp, so they stay
    /// accurate where `probs` underflows.
    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn vocab_size(&self) -> usize {
        self.probs.len()
    }

    /// Inverse-CDF draw using one uniform variate from `rng`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> TokenId {
        let u: f64 = rng.random();
        let mut cumulative = 0.0;
        for (i, &p) in self.probs.iter().enumerate() {
            cumulative += p;
            if u < cumulative {
                return i as TokenId;
            }
        }
        // Rounding left the CDF slightly below 1; fall back to the last token with mass.
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0) as TokenId
    }
}

fn check_temperature(tau: f64) -> Result<(), MechanismError> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(MechanismError::InvalidParameter(format!(
            "temperature must be a positive finite number, got {tau}"
        )));
    }
    Ok(())
}

pub fn token_distribution(
    z_hat: &LogitVector,
    tau: f64,
) -> Result<TokenDistribution, MechanismError> {
    check_temperature(tau)?;
    let scaled: Vec<f64> = z_hat.values.iter().map(|v| v / tau).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = scaled.iter().map(|v| v - max).collect();
    let sum: f64 = shifted.iter().map(|v| v.exp()).sum();
    let log_norm = sum.ln();
    let log_probs: Vec<f64> = shifted.iter().map(|v| v - log_norm).collect();
    let probs = shifted.iter().map(|v| v.exp() / sum).collect();
    Ok(TokenDistribution {
        probs,
        log_probs,
        temperature: tau,
    })
}

/// Draw a token with probability `softmax(z_hat / tau)`.
pub fn sample_token<R: Rng + ?Sized>(
    z_hat: &LogitVector,
    tau: f64,
    rng: &mut R,
) -> Result<TokenId, MechanismError> {
    Ok(token_distribution(z_hat, tau)?.sample(rng))
}
