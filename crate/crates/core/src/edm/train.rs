use std::sync::LazyLock;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{weighted_loss, EdmConfig, EdmError};
use crate::nn::DenoiserModel;
use crate::pipeline::TrainingPair;
use crate::tensor::{adam_step, AdamState, Graph, Tensor, TensorError};

static STANDARD_NORMAL: LazyLock<Normal> = LazyLock::new(Normal::standard);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self { epochs: 2000, batch_size: 16, lr: 2e-4, seed: 0 }
    }
}

/// Affine maps between physical fields (mm/h) and the model's working scale.
/// Residuals are standardized by the training-set mean/std and rescaled to
/// σ_data; conditioning fields are divided by their training-set std.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub residual_mean: f64,
    pub residual_std: f64,
    pub cond_scale: f64,
    pub sigma_data: f64,
}

impl Normalization {
    pub fn identity(sigma_data: f64) -> Self {
        Self { residual_mean: 0.0, residual_std: sigma_data, cond_scale: 1.0, sigma_data }
    }

    /// Statistics over every finite training pixel.
    pub fn fit(data: &[TrainingPair], sigma_data: f64) -> Self {
        let (mean_r, std_r) = moments(data.iter().flat_map(|p| p.target_residual.values().iter().copied()));
        let (_, std_c) = moments(data.iter().flat_map(|p| p.cond.values().iter().copied()));
        let floor = |s: f64| if s > 1e-9 { s } else { 1.0 };
        Self { residual_mean: mean_r, residual_std: floor(std_r), cond_scale: floor(std_c), sigma_data }
    }

    pub fn residual_to_model(&self, v: f64) -> f64 {
        if v.is_finite() {
            (v - self.residual_mean) / self.residual_std * self.sigma_data
        } else {
            0.0
        }
    }

    pub fn residual_from_model(&self, z: f64) -> f64 {
        z / self.sigma_data * self.residual_std + self.residual_mean
    }

    pub fn cond_to_model(&self, v: f64) -> f64 {
        if v.is_finite() {
            v / self.cond_scale
        } else {
            0.0
        }
    }
}

fn moments(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0, 0.0);
    for v in values.filter(|v| v.is_finite()) {
        n += 1;
        let d = v - mean;
        mean += d / n as f64;
        m2 += d * (v - mean);
    }
    if n == 0 {
        (0.0, 0.0)
    } else {
        (mean, (m2 / n as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Loss of every optimizer step.
    pub step_losses: Vec<f64>,
    pub normalization: Normalization,
}

/// Adam training of the denoiser on residual/conditioning pairs.
///
/// Batches are reshuffled every epoch from the seeded generator. Each batch
/// item gets its own tape (items may run in parallel); per-item gradients are
/// summed in batch order so results do not depend on the thread count.
pub fn train(
    model: &mut DenoiserModel,
    data: &[TrainingPair],
    hyper: &TrainHyper,
    config: &EdmConfig,
) -> Result<TrainReport, EdmError> {
    if data.is_empty() {
        return Err(EdmError::Precondition("training set is empty".into()));
    }
    if hyper.batch_size == 0 || hyper.epochs == 0 || !(hyper.lr > 0.0) {
        return Err(EdmError::InvalidConfig(format!("bad training hyperparameters {hyper:?}")));
    }
    config.validate()?;
    let norm = Normalization::fit(data, config.sigma_data);
    let (targets, conds) = to_model_tensors(data, &norm)?;

    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut adam = AdamState::new(model.params(), hyper.lr);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport { epoch_losses: Vec::new(), step_losses: Vec::new(), normalization: norm };

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let step = report.step_losses.len();
            let sigmas = stratified_sigmas(batch.len(), config, &mut rng);
            let jobs: Vec<(usize, f64, Tensor)> = batch
                .iter()
                .zip(sigmas)
                .map(|(&i, sigma)| {
                    let noise = Tensor::randn(targets[i].shape(), sigma, &mut rng);
                    (i, sigma, noise)
                })
                .collect();
            let model_ref = &*model;
            let results: Vec<Result<(f64, Vec<Tensor>), EdmError>> = jobs
                .par_iter()
                .map(|(i, sigma, noise)| {
                    let target = &targets[*i];
                    let noisy =
                        Tensor::new(target.shape(), target.data().iter().zip(noise.data()).map(|(y, n)| y + n).collect())?;
                    let mut g = Graph::new();
                    let params = model_ref.bind(&mut g);
                    let loss = weighted_loss(&mut g, model_ref, &params, &noisy, target, &conds[*i], &[*sigma], config)?;
                    let value = g.value(loss).item();
                    if !value.is_finite() {
                        return Err(EdmError::TrainingDivergence { sigma: *sigma, step: Some(step) });
                    }
                    let mut grads = g.backward(loss)?;
                    let grads = params
                        .iter()
                        .zip(model_ref.params().tensors())
                        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
                        .collect();
                    Ok((value, grads))
                })
                .collect();

            let scale = 1.0 / batch.len() as f64;
            let mut loss = 0.0;
            let mut total: Vec<Tensor> = model.params().tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            for r in results {
                let (value, grads) = r?;
                loss += scale * value;
                for (acc, g) in total.iter_mut().zip(&grads) {
                    acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, g)| *a += scale * g);
                }
            }
            adam_step(model.params_mut(), &total, &mut adam).map_err(|e| match e {
                TensorError::NonFiniteGradient(_) => {
                    EdmError::TrainingDivergence { sigma: jobs.iter().map(|j| j.1).fold(f64::NAN, f64::max), step: Some(step) }
                }
                other => other.into(),
            })?;
            report.step_losses.push(loss);
            epoch_sum += loss * batch.len() as f64;
        }
        let mean = epoch_sum / data.len() as f64;
        report.epoch_losses.push(mean);
        if (epoch + 1) % 50 == 0 || epoch + 1 == hyper.epochs {
            log::info!("epoch {}/{}: mean loss {mean:.5}", epoch + 1, hyper.epochs);
        }
    }
    Ok(report)
}

/// Noise levels for one batch: ln σ follows N(p_mean, p_std²) marginally, but
/// the batch is stratified over the quantiles `(k + u)/B` (one shared uniform
/// offset, randomly assigned to items), which lowers gradient variance.
fn stratified_sigmas<R: Rng + ?Sized>(n: usize, config: &EdmConfig, rng: &mut R) -> Vec<f64> {
    let offset: f64 = rng.random();
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(rng);
    slots
        .into_iter()
        .map(|k| {
            let u = ((k as f64 + offset) / n as f64).clamp(1e-12, 1.0 - 1e-12);
            (config.p_mean + config.p_std * STANDARD_NORMAL.inverse_cdf(u)).exp()
        })
        .collect()
}

/// Converts pairs to `[1, 1, H, W]` model-scale tensors.
pub(crate) fn to_model_tensors(data: &[TrainingPair], norm: &Normalization) -> Result<(Vec<Tensor>, Vec<Tensor>), EdmError> {
    let mut targets = Vec::with_capacity(data.len());
    let mut conds = Vec::with_capacity(data.len());
    for p in data {
        let (r, c) = (p.target_residual.rows(), p.target_residual.cols());
        if (p.cond.rows(), p.cond.cols()) != (r, c) {
            return Err(EdmError::Precondition(format!("pair `{}`: cond and residual shapes differ", p.source_id)));
        }
        targets
            .push(Tensor::new(&[1, 1, r, c], p.target_residual.values().iter().map(|&v| norm.residual_to_model(v)).collect())?);
        conds.push(Tensor::new(&[1, 1, r, c], p.cond.values().iter().map(|&v| norm.cond_to_model(v)).collect())?);
    }
    Ok((targets, conds))
}
