use gsp_core::optim::TrainError;
use gsp_core::pretrain::PretrainError;

/// Failure of a command, mapped onto the process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("numeric divergence at epoch {epoch}: {context}")]
    Divergence { epoch: usize, context: String },
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Divergence { .. } => 3,
            CliError::Config(_) | CliError::Input(_) => 2,
            CliError::Io(_) => 1,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }

    pub(crate) fn from_train(e: TrainError, context: impl Into<String>) -> Self {
        match e {
            TrainError::Divergence { epoch } => CliError::Divergence {
                epoch,
                context: context.into(),
            },
            TrainError::Config(m) => CliError::Config(m),
            other => CliError::Input(format!("{}: {other}", context.into())),
        }
    }

    pub(crate) fn from_pretrain(e: PretrainError) -> Self {
        match e {
            PretrainError::Divergence { epoch } => CliError::Divergence {
                epoch,
                context: "pre-training".into(),
            },
            PretrainError::Config(m) => CliError::Config(m),
            other => CliError::Input(other.to_string()),
        }
    }
}
