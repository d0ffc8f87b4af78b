use dpsynth_core::accountant::AccountingError;
use dpsynth_core::attack::AttackError;
use dpsynth_core::eval::EvalError;
use dpsynth_core::mechanism::MechanismError;
use dpsynth_core::pipeline::{PipelineError, TemplateError};
use dpsynth_core::provider::ProviderError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Provider(String),
    /// Budget exhaustion or a privacy-policy violation.
    #[error("{0}")]
    Privacy(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 1,
            CliError::Provider(_) => 2,
            CliError::Privacy(_) => 3,
        }
    }
}

impl From<ProviderError> for CliError {
    fn from(e: ProviderError) -> Self {
        match e {
            ProviderError::Spec { .. } | ProviderError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Provider(e.to_string()),
        }
    }
}

impl From<AccountingError> for CliError {
    fn from(e: AccountingError) -> Self {
        match e {
            AccountingError::BudgetExhausted { .. } => CliError::Privacy(e.to_string()),
            AccountingError::InvalidParameter(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<TemplateError> for CliError {
    fn from(e: TemplateError) -> Self {
        match e {
            TemplateError::Policy(_) => CliError::Privacy(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<MechanismError> for CliError {
    fn from(e: MechanismError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Provider { source, .. } => source.into(),
            PipelineError::Accounting(e) => e.into(),
            PipelineError::Template(e) => e.into(),
            PipelineError::Policy(_) => CliError::Privacy(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Provider(e) => e.into(),
            EvalError::Pipeline(e) => e.into(),
            EvalError::Config(_) => CliError::Config(e.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Provider(e) => e.into(),
            AttackError::Pipeline(e) => e.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}
