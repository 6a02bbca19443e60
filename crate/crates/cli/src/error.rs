use riskfield::ablations::{AblationError, PolicyVariant};
use riskfield::config::ConfigError;
use riskfield::evalsuite::EvalError;
use riskfield::export::ExportError;
use riskfield::learner::LearnerError;
use riskfield::world::WorldError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("no checkpoint for variant {variant} at {path}")]
    MissingCheckpoint { variant: PolicyVariant, path: String },
    #[error("checkpoint {path} holds variant {found}, expected {expected}")]
    WrongVariant {
        path: String,
        found: PolicyVariant,
        expected: PolicyVariant,
    },
    #[error(transparent)]
    Ablation(#[from] AblationError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Export(#[from] ExportError),
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("cannot build worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
    #[error("{failed} of {total} property checks failed")]
    ChecksFailed { failed: usize, total: usize },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(ConfigError::Read { .. } | ConfigError::Parse(_) | ConfigError::Invalid(_)) => 1,
            CliError::ChecksFailed { .. } => 3,
            _ => 2,
        }
    }
}
