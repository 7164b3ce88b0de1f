use std::path::Path;

use precipdiff_core::edm::EdmError;
use precipdiff_core::metrics::MetricsError;
use precipdiff_core::pipeline::PipelineError;
use precipdiff_core::raster::RasterError;
use precipdiff_core::tensor::CheckpointError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    ModelMismatch(String),
    #[error("{0}")]
    EvalMisuse(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io { .. } => 2,
            CliError::Divergence(_) => 3,
            CliError::ModelMismatch(_) => 4,
            CliError::EvalMisuse(_) => 5,
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io { path: path.display().to_string(), source }
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::WrongModel { .. } => CliError::ModelMismatch(e.to_string()),
            PipelineError::Edm(EdmError::TrainingDivergence { .. }) => CliError::Divergence(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<RasterError> for CliError {
    fn from(e: RasterError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::ShapeMismatch(..) => CliError::EvalMisuse(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}
