//! Privacy accounting.
//!
//! A target `(epsilon, delta)` over at most `T` tokens is turned into the
//! sampling temperature through the simplified advanced-composition bound
//! `epsilon = sqrt(2T ln(1/delta)) * epsilon'`, where each token step is
//! `epsilon' = c / (s * tau)` differentially private. Reports always carry the
//! full bound (with the `T * epsilon' * (e^epsilon' - 1)` term) next to the
//! simplified one.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AccountingError {
    #[error("invalid privacy parameter: {0}")]
    InvalidParameter(String),
    #[error("privacy budget exhausted: all {max_tokens} token steps have been charged")]
    BudgetExhausted { max_tokens: usize },
}

/// Privacy configuration for one generation: `(epsilon, delta, T, c, s)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpParams {
    pub epsilon: f64,
    pub delta: f64,
    pub max_tokens: usize,
    pub clip_bound: f64,
    pub subset_size: usize,
}

impl DpParams {
    pub fn new(
        epsilon: f64,
        delta: f64,
        max_tokens: usize,
        clip_bound: f64,
        subset_size: usize,
    ) -> Result<Self, AccountingError> {
        let params = Self {
            epsilon,
            delta,
            max_tokens,
            clip_bound,
            subset_size,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<(), AccountingError> {
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(AccountingError::InvalidParameter(format!(
                "epsilon must be positive and finite, got {}",
                self.epsilon
            )));
        }
        check_delta(self.delta)?;
        if self.max_tokens == 0 {
            return Err(AccountingError::InvalidParameter(
                "max_tokens must be at least 1".into(),
            ));
        }
        if !(self.clip_bound.is_finite() && self.clip_bound > 0.0) {
            return Err(AccountingError::InvalidParameter(format!(
                "clip_bound must be positive and finite, got {}",
                self.clip_bound
            )));
        }
        if self.subset_size == 0 {
            return Err(AccountingError::InvalidParameter(
                "subset_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

fn check_delta(delta: f64) -> Result<(), AccountingError> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(AccountingError::InvalidParameter(format!(
            "delta must lie in (0, 1], got {delta}"
        )));
    }
    Ok(())
}

/// Quantities derived from [`DpParams`]: sensitivity, temperature, per-token epsilon.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedPrivacy {
    pub sensitivity: f64,
    pub temperature: f64,
    pub per_token_epsilon: f64,
}

/// `tau = 2 * Delta * sqrt(2T ln(1/delta)) / epsilon` with `Delta = c / (2s)`.
pub fn solve_temperature(params: &DpParams) -> Result<DerivedPrivacy, AccountingError> {
    params.validate()?;
    let log_inv_delta = (1.0 / params.delta).ln();
    if log_inv_delta <= 0.0 {
        return Err(AccountingError::InvalidParameter(
            "delta = 1 leaves no room for composition (temperature would be zero)".into(),
        ));
    }
    let sensitivity = params.clip_bound / (2.0 * params.subset_size as f64);
    let temperature =
        2.0 * sensitivity * (2.0 * params.max_tokens as f64 * log_inv_delta).sqrt() / params.epsilon;
    let per_token_epsilon = per_token_epsilon(params.clip_bound, params.subset_size, temperature)?;
    Ok(DerivedPrivacy {
        sensitivity,
        temperature,
        per_token_epsilon,
    })
}

/// `epsilon' = 2 * (c / 2s) / tau = c / (s * tau)`.
pub fn per_token_epsilon(c: f64, s: usize, tau: f64) -> Result<f64, AccountingError> {
    if !(c.is_finite() && c > 0.0) {
        return Err(AccountingError::InvalidParameter(format!(
            "clip bound must be positive and finite, got {c}"
        )));
    }
    if s == 0 {
        return Err(AccountingError::InvalidParameter(
            "subset size must be at least 1".into(),
        ));
    }
    if !(tau.is_finite() && tau > 0.0) {
        return Err(AccountingError::InvalidParameter(format!(
            "temperature must be positive and finite, got {tau}"
        )));
    }
    Ok(c / (s as f64 * tau))
}

/// Both advanced-composition bounds over `T` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComposedEpsilon {
    pub simplified: f64,
    pub full: f64,
}

pub fn compose(eps_prime: f64, steps: usize, delta: f64) -> Result<ComposedEpsilon, AccountingError> {
    if !(eps_prime.is_finite() && eps_prime > 0.0) {
        return Err(AccountingError::InvalidParameter(format!(
            "per-token epsilon must be positive and finite, got {eps_prime}"
        )));
    }
    if steps == 0 {
        return Err(AccountingError::InvalidParameter(
            "number of composed steps must be at least 1".into(),
        ));
    }
    check_delta(delta)?;
    let t = steps as f64;
    let simplified = (2.0 * t * (1.0 / delta).ln()).sqrt() * eps_prime;
    let full = simplified + t * eps_prime * eps_prime.exp_m1();
    Ok(ComposedEpsilon { simplified, full })
}

/// Structured accountant report written into run metadata.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccountantReport {
    pub epsilon: f64,
    pub delta: f64,
    pub max_tokens: usize,
    pub clip_bound: f64,
    pub subset_size: usize,
    pub sensitivity: f64,
    pub temperature: f64,
    pub per_token_epsilon: f64,
    pub composed_epsilon_simplified: f64,
    pub composed_epsilon_full: f64,
}

impl AccountantReport {
    pub fn new(params: &DpParams) -> Result<Self, AccountingError> {
        let derived = solve_temperature(params)?;
        let composed = compose(derived.per_token_epsilon, params.max_tokens, params.delta)?;
        Ok(Self {
            epsilon: params.epsilon,
            delta: params.delta,
            max_tokens: params.max_tokens,
            clip_bound: params.clip_bound,
            subset_size: params.subset_size,
            sensitivity: derived.sensitivity,
            temperature: derived.temperature,
            per_token_epsilon: derived.per_token_epsilon,
            composed_epsilon_simplified: composed.simplified,
            composed_epsilon_full: composed.full,
        })
    }
}

impl fmt::Display for AccountantReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "[privacy accountant]")?;
        writeln!(f, "epsilon                     = {}", self.epsilon)?;
        writeln!(f, "delta                       = {:e}", self.delta)?;
        writeln!(f, "max_tokens (T)              = {}", self.max_tokens)?;
        writeln!(f, "clip_bound (c)              = {}", self.clip_bound)?;
        writeln!(f, "subset_size (s)             = {}", self.subset_size)?;
        writeln!(f, "sensitivity                 = {:.10}", self.sensitivity)?;
        writeln!(f, "temperature                 = {:.10}", self.temperature)?;
        writeln!(f, "per_token_epsilon           = {:.10}", self.per_token_epsilon)?;
        writeln!(f, "composed_epsilon_simplified = {:.10}", self.composed_epsilon_simplified)?;
        write!(f, "composed_epsilon_full       = {:.10}", self.composed_epsilon_full)
    }
}

/// Parameters of the non-private baseline: a user-chosen temperature and no accountant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NonPrivateParams {
    pub temperature: f64,
    pub max_tokens: usize,
    pub clip_bound: f64,
    pub subset_size: usize,
}

/// How a generation run is accounted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum PrivacyMode {
    Private(DpParams),
    NonPrivate(NonPrivateParams),
}

/// Everything the decode loop needs, resolved from a [`PrivacyMode`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingPlan {
    pub temperature: f64,
    pub max_tokens: usize,
    pub clip_bound: f64,
    pub subset_size: usize,
    pub report: Option<AccountantReport>,
}

impl PrivacyMode {
    pub fn plan(&self) -> Result<SamplingPlan, AccountingError> {
        match self {
            PrivacyMode::Private(params) => {
                let report = AccountantReport::new(params)?;
                Ok(SamplingPlan {
                    temperature: report.temperature,
                    max_tokens: params.max_tokens,
                    clip_bound: params.clip_bound,
                    subset_size: params.subset_size,
                    report: Some(report),
                })
            }
            PrivacyMode::NonPrivate(p) => {
                if !(p.temperature.is_finite() && p.temperature > 0.0) {
                    return Err(AccountingError::InvalidParameter(format!(
                        "non-private temperature must be positive and finite, got {}",
                        p.temperature
                    )));
                }
                if p.max_tokens == 0 || p.subset_size == 0 {
                    return Err(AccountingError::InvalidParameter(
                        "max_tokens and subset_size must be at least 1".into(),
                    ));
                }
                if !(p.clip_bound.is_finite() && p.clip_bound > 0.0) {
                    return Err(AccountingError::InvalidParameter(format!(
                        "clip_bound must be positive and finite, got {}",
                        p.clip_bound
                    )));
                }
                Ok(SamplingPlan {
                    temperature: p.temperature,
                    max_tokens: p.max_tokens,
                    clip_bound: p.clip_bound,
                    subset_size: p.subset_size,
                    report: None,
                })
            }
        }
    }
}

/// Per-run counter of charged token steps. Never exceeds `max_tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct BudgetLedger {
    max_tokens: usize,
    spent_tokens: usize,
    per_token_epsilon: Option<f64>,
    delta: Option<f64>,
}

impl BudgetLedger {
    pub fn new(params: &DpParams) -> Result<Self, AccountingError> {
        let derived = solve_temperature(params)?;
        Ok(Self {
            max_tokens: params.max_tokens,
            spent_tokens: 0,
            per_token_epsilon: Some(derived.per_token_epsilon),
            delta: Some(params.delta),
        })
    }

    pub fn for_plan(plan: &SamplingPlan) -> Result<Self, AccountingError> {
        if plan.max_tokens == 0 {
            return Err(AccountingError::InvalidParameter(
                "max_tokens must be at least 1".into(),
            ));
        }
        Ok(Self {
            max_tokens: plan.max_tokens,
            spent_tokens: 0,
            per_token_epsilon: plan.report.map(|r| r.per_token_epsilon),
            delta: plan.report.map(|r| r.delta),
        })
    }

    /// Record one sampled token. Fails once `max_tokens` steps have been charged.
    pub fn charge(&mut self) -> Result<(), AccountingError> {
        if self.spent_tokens >= self.max_tokens {
            return Err(AccountingError::BudgetExhausted {
                max_tokens: self.max_tokens,
            });
        }
        self.spent_tokens += 1;
        Ok(())
    }

    pub fn spent_tokens(&self) -> usize {
        self.spent_tokens
    }

    pub fn max_tokens(&self) -> usize {
        self.max_tokens
    }

    pub fn remaining(&self) -> usize {
        self.max_tokens - self.spent_tokens
    }

    pub fn per_token_epsilon(&self) -> Option<f64> {
        self.per_token_epsilon
    }

    /// Composed epsilon of the steps charged so far; `None` in non-private mode.
    pub fn spent_epsilon(&self) -> Option<ComposedEpsilon> {
        match (self.per_token_epsilon, self.delta) {
            (Some(eps), Some(delta)) if self.spent_tokens > 0 => {
                compose(eps, self.spent_tokens, delta).ok()
            }
            (Some(_), Some(_)) => Some(ComposedEpsilon {
                simplified: 0.0,
                full: 0.0,
            }),
            _ => None,
        }
    }
}
