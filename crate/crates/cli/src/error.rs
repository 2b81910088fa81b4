//! Failure classes, exit codes and the machine-readable error record.

use std::fmt;

use progseg::model::ModelError;
use progseg::patchify::PatchError;
use progseg::preprocess::PreprocessError;
use progseg::raster::RasterError;
use progseg::synth::SynthError;
use progseg::train::TrainError;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    Config,
    Data,
    Training,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CliError {
    pub kind: FailureKind,
    /// Pipeline stage that failed, when known.
    pub stage: Option<String>,
    pub message: String,
}

impl CliError {
    pub fn new(kind: FailureKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            stage: None,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(FailureKind::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(FailureKind::Data, message)
    }

    pub fn training(message: impl Into<String>) -> Self {
        Self::new(FailureKind::Training, message)
    }

    pub fn at(mut self, stage: &str) -> Self {
        self.stage.get_or_insert_with(|| stage.to_string());
        self
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            FailureKind::Config => 2,
            FailureKind::Data => 3,
            FailureKind::Training => 4,
        }
    }

    /// One-line JSON record for stderr and `error.json`.
    pub fn record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            error: &'a CliError,
            exit_code: i32,
        }
        serde_json::to_string(&Record {
            error: self,
            exit_code: self.exit_code(),
        })
        .expect("plain record")
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.stage {
            Some(s) => write!(f, "{:?} error in {s}: {}", self.kind, self.message),
            None => write!(f, "{:?} error: {}", self.kind, self.message),
        }
    }
}

impl std::error::Error for CliError {}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self::data(e.to_string())
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<PatchError> for CliError {
    fn from(e: PatchError) -> Self {
        match e {
            PatchError::Invalid(_) => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<PreprocessError> for CliError {
    fn from(e: PreprocessError) -> Self {
        match e {
            PreprocessError::InvalidParams(_) => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidParams(_) | SynthError::TooFewTiles(_) => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::UnsupportedBackbone(_) | ModelError::InvalidSpec(_) => Self::config(e.to_string()),
            ModelError::Raster(_) | ModelError::Io(_) | ModelError::Corrupt(_) | ModelError::MissingWeight(_) => Self::data(e.to_string()),
            _ => Self::training(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::EmptyPlan => Self::config(e.to_string()),
            TrainError::Model(m) => m.into(),
            TrainError::Patch(p) => p.into(),
            TrainError::Raster(r) => r.into(),
            TrainError::MissingPatchSet { .. }
            | TrainError::EmptyDataset(_)
            | TrainError::SizeMismatch { .. }
            | TrainError::ChannelMismatch { .. }
            | TrainError::IndivisibleDimensions { .. } => Self::data(e.to_string()),
            _ => Self::training(e.to_string()),
        }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self::data(e.to_string())
    }
}
