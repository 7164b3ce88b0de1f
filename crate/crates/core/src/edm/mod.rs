//! EDM noise schedule, denoiser preconditioning, training loss and the
//! second-order stochastic sampler.

mod ddpm;
mod train;

pub use ddpm::DdpmSchedule;
pub use train::{train, Normalization, TrainHyper, TrainReport};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{noise_embedding, DenoiserModel};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EdmError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid EDM config: {0}")]
    InvalidConfig(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("training diverged at step {step:?} (sigma = {sigma}): non-finite loss")]
    TrainingDivergence { sigma: f64, step: Option<usize> },
    #[error("sampling diverged at step {step}: non-finite state")]
    SamplingDivergence { step: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EdmConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub sigma_data: f64,
    pub rho: f64,
    pub p_mean: f64,
    pub p_std: f64,
    pub num_steps: usize,
    pub s_churn: f64,
    pub s_min: f64,
    pub s_max: f64,
    pub s_noise: f64,
}

impl Default for EdmConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.002,
            sigma_max: 80.0,
            sigma_data: 0.5,
            rho: 7.0,
            p_mean: -1.2,
            p_std: 1.2,
            num_steps: 25,
            s_churn: 2.5,
            s_min: 0.05,
            s_max: 50.0,
            s_noise: 1.003,
        }
    }
}

impl EdmConfig {
    /// Deterministic Heun trajectory (no churn).
    pub fn without_churn(mut self) -> Self {
        self.s_churn = 0.0;
        self
    }

    pub fn validate(&self) -> Result<(), EdmError> {
        let bad = |m: &str| Err(EdmError::InvalidConfig(m.to_string()));
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return bad("need 0 < sigma_min < sigma_max");
        }
        if !(self.sigma_data > 0.0) || !(self.rho > 0.0) || !(self.p_std >= 0.0) {
            return bad("sigma_data and rho must be positive, p_std non-negative");
        }
        if self.num_steps < 2 {
            return bad("num_steps must be at least 2");
        }
        if self.s_churn < 0.0 || self.s_noise < 0.0 {
            return bad("s_churn and s_noise must be non-negative");
        }
        Ok(())
    }
}

/// Preconditioning scalars for one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn edm_precondition(sigma: f64, config: &EdmConfig) -> Result<Precond, EdmError> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(EdmError::InvalidArgument(format!("sigma must be positive and finite, got {sigma}")));
    }
    let sd = config.sigma_data;
    let total = sigma * sigma + sd * sd;
    Ok(Precond { c_skip: sd * sd / total, c_out: sigma * sd / total.sqrt(), c_in: 1.0 / total.sqrt(), c_noise: sigma.ln() / 4.0 })
}

/// Loss weight λ(σ) = (σ² + σ_d²) / (σ·σ_d)².
pub fn loss_weight(sigma: f64, config: &EdmConfig) -> f64 {
    let sd = config.sigma_data;
    (sigma * sigma + sd * sd) / (sigma * sd).powi(2)
}

/// Karras ρ-spaced noise levels from σ_max down to σ_min, followed by an exact 0.
pub fn sigma_steps(config: &EdmConfig) -> Result<Vec<f64>, EdmError> {
    config.validate()?;
    let n = config.num_steps;
    let inv_rho = 1.0 / config.rho;
    let (hi, lo) = (config.sigma_max.powf(inv_rho), config.sigma_min.powf(inv_rho));
    let mut steps: Vec<f64> = (0..n)
        .map(|i| {
            if i == 0 {
                config.sigma_max
            } else if i == n - 1 {
                config.sigma_min
            } else {
                (hi + i as f64 / (n - 1) as f64 * (lo - hi)).powf(config.rho)
            }
        })
        .collect();
    steps.push(0.0);
    Ok(steps)
}

/// A denoiser `D(x; σ)` conditioned on a field of the same spatial shape.
pub trait Denoiser {
    fn denoise(&self, x: &Tensor, sigma: f64, cond: &Tensor) -> Result<Tensor, EdmError>;
}

/// The U-Net wrapped in EDM preconditioning.
pub struct NetDenoiser<'a> {
    pub model: &'a DenoiserModel,
    pub config: &'a EdmConfig,
}

impl Denoiser for NetDenoiser<'_> {
    fn denoise(&self, x: &Tensor, sigma: f64, cond: &Tensor) -> Result<Tensor, EdmError> {
        denoise(self.model, x, sigma, cond, self.config)
    }
}

/// `D(x;σ) = c_skip·x + c_out·F(c_in·x, embed(c_noise), cond)`.
pub fn denoise(model: &DenoiserModel, x: &Tensor, sigma: f64, cond: &Tensor, config: &EdmConfig) -> Result<Tensor, EdmError> {
    let pc = edm_precondition(sigma, config)?;
    let [n, _, _, _] = x.dims4()?;
    let emb = noise_embedding(&vec![pc.c_noise; n], model.config().noise_embed_dim)?;
    let f = model.forward_tensors(&x.map(|v| pc.c_in * v), &emb, cond)?;
    let data = x.data().iter().zip(f.data()).map(|(&xv, &fv)| pc.c_skip * xv + pc.c_out * fv).collect();
    Ok(Tensor::new(x.shape(), data)?)
}

/// Exact posterior-mean denoiser for data distributed as N(mean, std²) per
/// element, independent of the conditioning.
#[derive(Clone, Copy, Debug)]
pub struct GaussianDenoiser {
    pub mean: f64,
    pub std: f64,
}

impl Denoiser for GaussianDenoiser {
    fn denoise(&self, x: &Tensor, sigma: f64, _cond: &Tensor) -> Result<Tensor, EdmError> {
        let s2 = self.std * self.std;
        let v2 = sigma * sigma;
        Ok(x.map(|xv| (s2 * xv + v2 * self.mean) / (s2 + v2)))
    }
}

/// Builds the weighted denoising loss for a batch on `g`.
///
/// Per item: ln σ ~ N(p_mean, p_std²), n ~ N(0, σ²I), and the loss is
/// λ(σ)·mean((D(y + n; σ) − y)²); the batch loss is the mean over items.
/// Returns the loss node and the sampled σ per item.
pub fn training_loss<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &DenoiserModel,
    params: &[Var],
    target: &Tensor,
    cond: &Tensor,
    rng: &mut R,
    config: &EdmConfig,
) -> Result<(Var, Vec<f64>), EdmError> {
    if target.shape() != cond.shape() {
        return Err(EdmError::Precondition(format!(
            "target {:?} and conditioning {:?} shapes differ",
            target.shape(),
            cond.shape()
        )));
    }
    let [n, _, _, _] = target.dims4()?;
    let sigmas: Vec<f64> = (0..n).map(|_| (config.p_mean + config.p_std * rng.sample::<f64, _>(StandardNormal)).exp()).collect();
    let stride = target.numel() / n;
    let noisy: Vec<f64> =
        target.data().iter().enumerate().map(|(i, &y)| y + sigmas[i / stride] * rng.sample::<f64, _>(StandardNormal)).collect();
    let noisy = Tensor::new(target.shape(), noisy)?;
    let loss = weighted_loss(g, model, params, &noisy, target, cond, &sigmas, config)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        let sigma = sigmas.iter().copied().fold(f64::NAN, f64::max);
        return Err(EdmError::TrainingDivergence { sigma, step: None });
    }
    Ok((loss, sigmas))
}

/// Loss graph for fixed noisy inputs and noise levels.
#[allow(clippy::too_many_arguments)]
pub(crate) fn weighted_loss(
    g: &mut Graph,
    model: &DenoiserModel,
    params: &[Var],
    noisy: &Tensor,
    target: &Tensor,
    cond: &Tensor,
    sigmas: &[f64],
    config: &EdmConfig,
) -> Result<Var, EdmError> {
    let pcs = sigmas.iter().map(|&s| edm_precondition(s, config)).collect::<Result<Vec<_>, _>>()?;
    let pick = |f: fn(&Precond) -> f64| pcs.iter().map(f).collect::<Vec<f64>>();
    let x = g.constant(noisy.clone());
    let y = g.constant(target.clone());
    let c = g.constant(cond.clone());
    let emb = g.constant(noise_embedding(&pick(|p| p.c_noise), model.config().noise_embed_dim)?);
    let x_in = g.scale_items(x, &pick(|p| p.c_in))?;
    let f = model.forward(g, params, x_in, emb, c)?;
    let skip = g.scale_items(x, &pick(|p| p.c_skip))?;
    let out = g.scale_items(f, &pick(|p| p.c_out))?;
    let d = g.add(skip, out)?;
    let diff = g.sub(d, y)?;
    let root_w: Vec<f64> = sigmas.iter().map(|&s| loss_weight(s, config).sqrt()).collect();
    let weighted = g.scale_items(diff, &root_w)?;
    let sq = g.mul(weighted, weighted)?;
    Ok(g.mean(sq))
}

/// Second-order (Heun) stochastic EDM sampler. Returns the sample at σ = 0
/// with the shape of `cond`.
pub fn sample<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    cond: &Tensor,
    rng: &mut R,
    config: &EdmConfig,
) -> Result<Tensor, EdmError> {
    if !cond.is_finite() {
        return Err(EdmError::Precondition("conditioning contains non-finite values".into()));
    }
    let sigmas = sigma_steps(config)?;
    let n_steps = config.num_steps;
    let shape = cond.shape().to_vec();
    let mut x = Tensor::randn(&shape, sigmas[0], rng);
    let gamma_max = (config.s_churn / n_steps as f64).min(std::f64::consts::SQRT_2 - 1.0);

    for i in 0..n_steps {
        let (t_cur, t_next) = (sigmas[i], sigmas[i + 1]);
        let gamma = if (config.s_min..=config.s_max).contains(&t_cur) { gamma_max } else { 0.0 };
        let t_hat = t_cur * (1.0 + gamma);
        let x_hat = if gamma > 0.0 {
            let scale = config.s_noise * (t_hat * t_hat - t_cur * t_cur).sqrt();
            let noise = Tensor::randn(&shape, scale, rng);
            add_scaled(&x, &noise, 1.0)
        } else {
            x.clone()
        };

        let denoised = denoiser.denoise(&x_hat, t_hat, cond)?;
        let d_cur = slope(&x_hat, &denoised, t_hat);
        let mut x_next = add_scaled(&x_hat, &d_cur, t_next - t_hat);
        if t_next > 0.0 {
            let denoised = denoiser.denoise(&x_next, t_next, cond)?;
            let d_next = slope(&x_next, &denoised, t_next);
            let avg = add_scaled(&d_cur.map(|v| 0.5 * v), &d_next, 0.5);
            x_next = add_scaled(&x_hat, &avg, t_next - t_hat);
        }
        if !x_next.is_finite() {
            return Err(EdmError::SamplingDivergence { step: i });
        }
        x = x_next;
    }
    Ok(x)
}

fn slope(x: &Tensor, denoised: &Tensor, sigma: f64) -> Tensor {
    let data = x.data().iter().zip(denoised.data()).map(|(a, d)| (a - d) / sigma).collect();
    Tensor::new(x.shape(), data).expect("same shape")
}

fn add_scaled(a: &Tensor, b: &Tensor, s: f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + s * y).collect();
    Tensor::new(a.shape(), data).expect("same shape")
}
