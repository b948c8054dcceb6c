use std::path::PathBuf;

use kesa_core::corpus::CorpusError;
use kesa_core::lexicon::LexiconError;
use kesa_core::model::CheckpointError;
use kesa_core::synth::SynthError;
use kesa_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("config {path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Lexicon(#[from] LexiconError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{failed} of {total} sweep runs failed")]
    Sweep { failed: usize, total: usize, code: i32 },
}

impl CliError {
    /// 2 for bad input or configuration, 3 for divergence, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::Config { .. }
            | CliError::Corpus(_)
            | CliError::Lexicon(_)
            | CliError::Checkpoint(_)
            | CliError::Synth(_) => 2,
            CliError::Train(TrainError::Divergence { .. }) => 3,
            CliError::Train(TrainError::Config(_) | TrainError::EmptySplit(_)) => 2,
            CliError::Train(_) => 1,
            CliError::Io { .. } => 1,
            CliError::Sweep { code, .. } => *code,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}
