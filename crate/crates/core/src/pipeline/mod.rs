//! Datasets, the synthetic generator, baselines and the correct-then-downscale
//! inference chain.

mod baseline;
mod datasets;
mod infer;
mod synth;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::edm::EdmError;
use crate::raster::{PrecipGrid, RasterError};
use crate::tensor::{CheckpointError, TensorError};

pub use baseline::{affine_baseline_apply, affine_baseline_fit, AffineFit};
pub use datasets::{
    build_correction_dataset, build_downscale_dataset, filter_rain_events, rain_event_mask, split_train_test, zero_fraction,
};
pub use infer::{correct, downscale, unified_inference, InferConfig, TaskModel, UnifiedOutput};
pub use synth::{apply_bias, gaussian_random_field, synth_event, BiasOperatorParams, SynthParams};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Raster(#[from] RasterError),
    #[error(transparent)]
    Edm(#[from] EdmError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("pairing: {0}")]
    Pairing(String),
    #[error("alignment: {0}")]
    Alignment(String),
    #[error("model was trained for {found}, expected {expected}")]
    WrongModel { expected: Task, found: Task },
    #[error("singular affine fit: conditioning has no variance")]
    SingularFit,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Correction,
    Downscale,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Correction => "correction",
            Task::Downscale => "downscale",
        })
    }
}

/// A conditioning field and the residual the model learns to sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingPair {
    pub cond: PrecipGrid,
    pub target_residual: PrecipGrid,
    pub task: Task,
    pub source_id: String,
}
