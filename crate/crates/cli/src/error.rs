use std::process::ExitCode;

use stochbarrier::Error as CoreError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("infeasible: {0}")]
    Infeasible(CoreError),
    #[error("soundness check failed for: {}", .0.join(", "))]
    Unsound(Vec<String>),
    #[error(transparent)]
    Core(CoreError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Infeasible { .. } | CoreError::ControllerInfeasible { .. } => {
                CliError::Infeasible(e)
            }
            CoreError::InvalidParams(_)
            | CoreError::InvalidCovariance(_)
            | CoreError::NotPsd { .. }
            | CoreError::DimensionMismatch(_)
            | CoreError::IncompatibleBarrier(_)
            | CoreError::NonConcaveConstraint
            | CoreError::MarginOutOfRange { .. } => CliError::Config(e.to_string()),
            other => CliError::Core(other),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> ExitCode {
        ExitCode::from(match self {
            CliError::Config(_) => 2,
            CliError::Infeasible(_) => 3,
            CliError::Unsound(_) => 4,
            _ => 1,
        })
    }
}
