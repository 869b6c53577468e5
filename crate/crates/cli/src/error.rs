use std::path::PathBuf;

use sspool_core::diffcore::DiffError;
use sspool_core::dsp::DspError;
use sspool_core::encoder::ModelError;
use sspool_core::eval::EvalError;
use sspool_core::synth::SynthError;
use sspool_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{context}: {source}")]
    Train { context: String, source: TrainError },
    #[error("{context}: {source}")]
    Eval { context: String, source: EvalError },
    #[error("{context}: {source}")]
    Synth { context: String, source: SynthError },
    #[error("{context}: {source}")]
    Dsp { context: String, source: DspError },
    #[error("{context}: {source}")]
    Model { context: String, source: ModelError },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
}

fn diff_is_numeric(e: &DiffError) -> bool {
    matches!(e, DiffError::NonFinite { .. })
}

fn model_is_numeric(e: &ModelError) -> bool {
    match e {
        ModelError::DegeneratePooling { .. } => true,
        ModelError::Diff(d) => diff_is_numeric(d),
        _ => false,
    }
}

impl CliError {
    pub const USAGE: u8 = 1;
    pub const DATA: u8 = 2;
    pub const NUMERIC: u8 = 3;

    pub fn exit_code(&self) -> u8 {
        let numeric = match self {
            CliError::Usage(_) => return Self::USAGE,
            CliError::Train { source, .. } => match source {
                TrainError::Config(_) => return Self::USAGE,
                TrainError::NonFiniteGradient(_) | TrainError::NonFiniteLoss { .. } => true,
                TrainError::Model(m) => model_is_numeric(m),
                TrainError::Diff(d) => diff_is_numeric(d),
                _ => false,
            },
            CliError::Eval { source, .. } => match source {
                EvalError::Model(m) => model_is_numeric(m),
                _ => false,
            },
            CliError::Model { source, .. } => model_is_numeric(source),
            _ => false,
        };
        if numeric {
            Self::NUMERIC
        } else {
            Self::DATA
        }
    }
}

/// Attaches a context string to a module error.
pub trait Context<T> {
    fn context(self, what: impl Into<String>) -> Result<T, CliError>;
}

macro_rules! impl_context {
    ($err:ty, $variant:ident) => {
        impl<T> Context<T> for Result<T, $err> {
            fn context(self, what: impl Into<String>) -> Result<T, CliError> {
                self.map_err(|source| CliError::$variant { context: what.into(), source })
            }
        }
    };
}

impl_context!(TrainError, Train);
impl_context!(EvalError, Eval);
impl_context!(SynthError, Synth);
impl_context!(DspError, Dsp);
impl_context!(ModelError, Model);
