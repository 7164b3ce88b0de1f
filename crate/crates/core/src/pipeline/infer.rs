use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{PipelineError, Task};
use crate::edm::{sample, EdmConfig, NetDenoiser, Normalization};
use crate::nn::{DenoiserModel, UNetConfig};
use crate::raster::{extract_patches, linear_upsample, stitch_patches, Patch, PrecipGrid};
use crate::tensor::{read_checkpoint, write_checkpoint, ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferConfig {
    /// Sampler settings; `sigma_data` is taken from the model.
    pub edm: EdmConfig,
    /// Correction tiles; grids no larger than a tile run whole.
    pub patch_size: usize,
    pub patch_stride: usize,
    /// Independent samples averaged per output.
    pub ensemble: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self { edm: EdmConfig::default(), patch_size: 20, patch_stride: 10, ensemble: 1 }
    }
}

/// A trained denoiser together with everything needed to run it.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskModel {
    pub task: Task,
    pub factor: usize,
    pub model: DenoiserModel,
    pub norm: Normalization,
}

const META_PREFIX: &str = "meta.";
const NORM_PREFIX: &str = "norm.";

fn meta_scalar(store: &ParamStore, name: &str) -> Result<f64, PipelineError> {
    store
        .get(name)
        .filter(|t| t.numel() == 1)
        .map(|t| t.data()[0])
        .ok_or_else(|| PipelineError::InvalidArgument(format!("checkpoint lacks `{name}`")))
}

impl TaskModel {
    /// Network parameters followed by `meta.*` and `norm.*` records.
    pub fn to_param_store(&self) -> ParamStore {
        let mut store = self.model.params().clone();
        let cfg = self.model.config();
        let scalars = [
            ("meta.task", if self.task == Task::Correction { 0.0 } else { 1.0 }),
            ("meta.factor", self.factor as f64),
            ("meta.in_channels", cfg.in_channels as f64),
            ("meta.out_channels", cfg.out_channels as f64),
            ("meta.noise_embed_dim", cfg.noise_embed_dim as f64),
            ("meta.pad_to_multiple", if cfg.pad_to_multiple { 1.0 } else { 0.0 }),
            ("norm.residual_mean", self.norm.residual_mean),
            ("norm.residual_std", self.norm.residual_std),
            ("norm.cond_scale", self.norm.cond_scale),
            ("norm.sigma_data", self.norm.sigma_data),
        ];
        for (name, v) in scalars {
            store.push(name, Tensor::scalar(v));
        }
        let channels: Vec<f64> = cfg.base_channels_per_level.iter().map(|&c| c as f64).collect();
        store.push("meta.channels", Tensor::new(&[channels.len()], channels).expect("non-empty channel list"));
        store
    }

    pub fn from_param_store(store: ParamStore) -> Result<Self, PipelineError> {
        let count = |name: &str| -> Result<usize, PipelineError> {
            let v = meta_scalar(&store, name)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(PipelineError::InvalidArgument(format!("`{name}` = {v} is not a count")));
            }
            Ok(v as usize)
        };
        let task = match meta_scalar(&store, "meta.task")? {
            0.0 => Task::Correction,
            1.0 => Task::Downscale,
            t => return Err(PipelineError::InvalidArgument(format!("unknown task tag {t}"))),
        };
        let channels: Vec<usize> = store
            .get("meta.channels")
            .ok_or_else(|| PipelineError::InvalidArgument("checkpoint lacks `meta.channels`".into()))?
            .data()
            .iter()
            .map(|&c| c as usize)
            .collect();
        let config = UNetConfig {
            in_channels: count("meta.in_channels")?,
            blocks: channels.len(),
            base_channels_per_level: channels,
            noise_embed_dim: count("meta.noise_embed_dim")?,
            out_channels: count("meta.out_channels")?,
            pad_to_multiple: meta_scalar(&store, "meta.pad_to_multiple")? != 0.0,
        };
        let norm = Normalization {
            residual_mean: meta_scalar(&store, "norm.residual_mean")?,
            residual_std: meta_scalar(&store, "norm.residual_std")?,
            cond_scale: meta_scalar(&store, "norm.cond_scale")?,
            sigma_data: meta_scalar(&store, "norm.sigma_data")?,
        };
        let factor = count("meta.factor")?;
        let mut params = ParamStore::new();
        for (name, t) in store.iter() {
            if !name.starts_with(META_PREFIX) && !name.starts_with(NORM_PREFIX) {
                params.push(name, t.clone());
            }
        }
        let model = DenoiserModel::from_params(config, params)?;
        Ok(Self { task, factor, model, norm })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PipelineError> {
        Ok(write_checkpoint(&self.to_param_store(), path)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, PipelineError> {
        Self::from_param_store(read_checkpoint(path)?)
    }

    fn expect(&self, task: Task) -> Result<(), PipelineError> {
        if self.task != task {
            return Err(PipelineError::WrongModel { expected: task, found: self.task });
        }
        Ok(())
    }

    /// Samples residuals for equally sized conditioning fields, in mm/h,
    /// averaging `config.ensemble` members.
    fn sample_residuals<R: Rng + ?Sized>(
        &self,
        conds: &[&PrecipGrid],
        config: &InferConfig,
        rng: &mut R,
    ) -> Result<Vec<Vec<f64>>, PipelineError> {
        if config.ensemble == 0 {
            return Err(PipelineError::InvalidArgument("ensemble size must be >= 1".into()));
        }
        let (rows, cols) = conds[0].shape();
        let data: Vec<f64> = conds.iter().flat_map(|c| c.values().iter().map(|&v| self.norm.cond_to_model(v))).collect();
        let cond = Tensor::new(&[conds.len(), 1, rows, cols], data)?;
        let edm = EdmConfig { sigma_data: self.norm.sigma_data, ..config.edm.clone() };
        let denoiser = NetDenoiser { model: &self.model, config: &edm };
        let mut acc = vec![0.0; cond.numel()];
        for _ in 0..config.ensemble {
            let x = sample(&denoiser, &cond, rng, &edm)?;
            acc.iter_mut().zip(x.data()).for_each(|(a, v)| *a += v);
        }
        let inv = 1.0 / config.ensemble as f64;
        Ok(acc.chunks(rows * cols).map(|item| item.iter().map(|&z| self.norm.residual_from_model(z * inv)).collect()).collect())
    }
}

/// Bias-corrects a satellite grid: sampled residuals are added tile by tile,
/// overlapping tiles are averaged and negatives clamped to zero.
pub fn correct<R: Rng + ?Sized>(
    sat: &PrecipGrid,
    model: &TaskModel,
    config: &InferConfig,
    rng: &mut R,
) -> Result<PrecipGrid, PipelineError> {
    model.expect(Task::Correction)?;
    let (rows, cols) = sat.shape();
    let size = config.patch_size.min(rows).min(cols);
    let tiles = extract_patches(sat, size, config.patch_stride)?;
    let conds: Vec<&PrecipGrid> = tiles.iter().map(|p| &p.grid).collect();
    let residuals = model.sample_residuals(&conds, config, rng)?;
    let patches: Vec<Patch> = tiles
        .iter()
        .zip(residuals)
        .map(|(t, r)| Patch { grid: PrecipGrid::from_parts(size, size, r, *sat.meta()), row_off: t.row_off, col_off: t.col_off })
        .collect();
    let residual = stitch_patches(&patches, rows, cols, *sat.meta())?;
    Ok(sat.zip_with(&residual, |s, r| s + r)?.clamp_non_negative())
}

/// Downscales by `factor`: the linearly upsampled field plus a sampled
/// full-frame residual, clamped to be non-negative.
pub fn downscale<R: Rng + ?Sized>(
    lr: &PrecipGrid,
    model: &TaskModel,
    factor: usize,
    config: &InferConfig,
    rng: &mut R,
) -> Result<PrecipGrid, PipelineError> {
    model.expect(Task::Downscale)?;
    if factor != model.factor {
        return Err(PipelineError::InvalidArgument(format!("model was trained for factor {}, got {factor}", model.factor)));
    }
    let cond = linear_upsample(lr, factor)?;
    let residual = model.sample_residuals(&[&cond], config, rng)?.remove(0);
    let values = cond.values().iter().zip(&residual).map(|(c, r)| c + r).collect();
    Ok(PrecipGrid::from_parts(cond.rows(), cond.cols(), values, *cond.meta()).clamp_non_negative())
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedOutput {
    pub corrected: PrecipGrid,
    pub downscaled: PrecipGrid,
}

/// Correction followed by downscaling of the corrected field.
pub fn unified_inference<R: Rng + ?Sized>(
    sat: &PrecipGrid,
    corr_model: &TaskModel,
    down_model: &TaskModel,
    factor: usize,
    config: &InferConfig,
    rng: &mut R,
) -> Result<UnifiedOutput, PipelineError> {
    let corrected = correct(sat, corr_model, config, rng)?;
    let downscaled = downscale(&corrected, down_model, factor, config, rng)?;
    Ok(UnifiedOutput { corrected, downscaled })
}
