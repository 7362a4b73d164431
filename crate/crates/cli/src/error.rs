use std::path::PathBuf;

use posedet::annotation::AnnotationError;
use posedet::network::NetworkError;
use posedet::synth::SynthError;
use posedet::targets::TargetError;
use posedet::trainer::TrainError;
use thiserror::Error;

/// Every failure carries the module that raised it and the error case name.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{message}")]
    Module { module: &'static str, kind: &'static str, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

impl CliError {
    /// `module::Kind` label printed on failure.
    pub fn label(&self) -> String {
        match self {
            CliError::Config(_) => "cli::ConfigError".into(),
            CliError::Module { module, kind, .. } => format!("{module}::{kind}"),
            CliError::Io { .. } => "cli::IoError".into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }

    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
        let path = path.into();
        move |source| CliError::Io { path, source }
    }
}

impl From<AnnotationError> for CliError {
    fn from(e: AnnotationError) -> Self {
        CliError::Module { module: "annotation_ingest", kind: e.kind(), message: e.to_string() }
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Module { module: "synthetic_scenes", kind: e.kind(), message: e.to_string() }
    }
}

impl From<NetworkError> for CliError {
    fn from(e: NetworkError) -> Self {
        CliError::Module { module: "network", kind: e.kind(), message: e.to_string() }
    }
}

impl From<TargetError> for CliError {
    fn from(e: TargetError) -> Self {
        let kind = match e {
            TargetError::IndivisibleInput { .. } => "IndivisibleInput",
            TargetError::NonPositiveTarget { .. } => "NonPositiveTarget",
        };
        CliError::Module { module: "target_assignment", kind, message: e.to_string() }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let module = match &e {
            TrainError::Network(_) => "network",
            TrainError::Loss(_) => "losses",
            TrainError::Target(_) => "target_assignment",
            _ => "trainer",
        };
        CliError::Module { module, kind: e.kind(), message: e.to_string() }
    }
}
