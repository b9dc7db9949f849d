use std::path::Path;

use sves_core::cmaes::CmaError;
use sves_core::fitness::FitnessError;
use sves_core::lowrank::LowRankError;
use sves_core::model::ModelError;
use sves_core::scheduler::SchedulerError;
use thiserror::Error;

/// Every failure carries the process exit code it maps to.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Transport(_) => 4,
            CliError::Io { .. } => 1,
        }
    }

    pub fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
        move |source| CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::TrainingDiverged(_) => CliError::Numerical(e.to_string()),
            ModelError::LowRank(inner) => inner.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<LowRankError> for CliError {
    fn from(e: LowRankError) -> Self {
        match e {
            LowRankError::InvalidMatrix(_) | LowRankError::DecompositionFailed(_) | LowRankError::InvalidCandidate(_) => {
                CliError::Numerical(e.to_string())
            }
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<CmaError> for CliError {
    fn from(e: CmaError) -> Self {
        match e {
            CmaError::InvalidConfig(_) | CmaError::CorruptCheckpoint(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<FitnessError> for CliError {
    fn from(e: FitnessError) -> Self {
        match e {
            FitnessError::InvalidConfig(_) => CliError::Config(e.to_string()),
            FitnessError::Model(inner) => inner.into(),
            FitnessError::LowRank(inner) => inner.into(),
        }
    }
}

impl From<SchedulerError> for CliError {
    fn from(e: SchedulerError) -> Self {
        match e {
            SchedulerError::InvalidCluster(_) | SchedulerError::ConfigMismatch | SchedulerError::Resume(_) => CliError::Config(e.to_string()),
            SchedulerError::Cma(inner) => inner.into(),
            SchedulerError::Observer(_) => CliError::Io {
                path: "run directory".into(),
                source: std::io::Error::other(e.to_string()),
            },
            SchedulerError::GenerationFailed { .. } | SchedulerError::Desync(_) | SchedulerError::Transport(_) => {
                CliError::Transport(e.to_string())
            }
        }
    }
}
