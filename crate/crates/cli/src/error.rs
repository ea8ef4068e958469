use std::path::PathBuf;

use sigeo_core::arch::ArchError;
use sigeo_core::data::DataError;
use sigeo_core::evolution::{EvoError, ScoreError};
use sigeo_core::harness::HarnessError;
use sigeo_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Compute(String),
}

impl CliError {
    /// 2 for configuration, input and output problems; 1 for failures during compute.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Io { .. } | CliError::Data(_) => 2,
            CliError::Compute(_) => 1,
        }
    }
}

impl From<ArchError> for CliError {
    fn from(e: ArchError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::BadConfig(_) | HarnessError::Arch(_) => CliError::Config(e.to_string()),
            HarnessError::Data(d) => CliError::Data(d),
            _ => CliError::Compute(e.to_string()),
        }
    }
}

impl From<EvoError> for CliError {
    fn from(e: EvoError) -> Self {
        match e {
            EvoError::BadConfig(_) | EvoError::Arch(_) => CliError::Config(e.to_string()),
            EvoError::Pool(_) => CliError::Compute(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::BadLearningRate(_) | TrainError::BadConfig(_) => CliError::Config(e.to_string()),
            TrainError::Data(d) => CliError::Data(d),
            _ => CliError::Compute(e.to_string()),
        }
    }
}

impl From<ScoreError> for CliError {
    fn from(e: ScoreError) -> Self {
        match e {
            ScoreError::BadK(_) => CliError::Config(e.to_string()),
            ScoreError::Train(t) => t.into(),
            ScoreError::Data(d) => CliError::Data(d),
            ScoreError::Proxy(_) => CliError::Compute(e.to_string()),
        }
    }
}
