//! Discrete DDPM forward process, kept as a reference for the noise model.
//!
//! Step kernel: `q(x_t | x_{t-1}) = N(√(1-β_t)·x_{t-1}, β_t·I)`; composing
//! steps gives the marginal `q(x_t | x_0) = N(√ᾱ_t·x_0, (1-ᾱ_t)·I)` with
//! `ᾱ_t = Π_{s≤t}(1-β_s)`. The reverse-kernel reference is the Gaussian
//! posterior `q(x_{t-1} | x_t, x_0)`, whose mean/variance play the role of the
//! learned `μ_θ`, `Σ_θ` in a trained DDPM.

use rand::Rng;

use super::EdmError;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DdpmSchedule {
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl DdpmSchedule {
    pub fn new(betas: Vec<f64>) -> Result<Self, EdmError> {
        if betas.is_empty() {
            return Err(EdmError::InvalidConfig("DDPM schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(EdmError::InvalidConfig(format!("beta {b} outside (0, 1)")));
        }
        let alpha_bars = betas
            .iter()
            .scan(1.0, |acc, b| {
                *acc *= 1.0 - b;
                Some(*acc)
            })
            .collect();
        Ok(Self { betas, alpha_bars })
    }

    /// Betas linearly spaced from `start` to `end` over `steps` steps.
    pub fn linear(steps: usize, start: f64, end: f64) -> Result<Self, EdmError> {
        let betas = match steps {
            0 => Vec::new(),
            1 => vec![start],
            _ => (0..steps).map(|i| start + (end - start) * i as f64 / (steps - 1) as f64).collect(),
        };
        Self::new(betas)
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    fn check_t(&self, t: usize) -> Result<(), EdmError> {
        if t == 0 || t > self.steps() {
            return Err(EdmError::InvalidArgument(format!("t = {t} outside 1..={}", self.steps())));
        }
        Ok(())
    }

    /// ᾱ_t for 1-based `t`.
    pub fn alpha_bar(&self, t: usize) -> Result<f64, EdmError> {
        self.check_t(t)?;
        Ok(self.alpha_bars[t - 1])
    }

    /// Draws `x_t ~ q(x_t | x_0)` in closed form.
    pub fn forward_marginal<R: Rng + ?Sized>(&self, x0: &Tensor, t: usize, rng: &mut R) -> Result<Tensor, EdmError> {
        let ab = self.alpha_bar(t)?;
        let eps = Tensor::randn(x0.shape(), 1.0, rng);
        let data = x0.data().iter().zip(eps.data()).map(|(x, e)| ab.sqrt() * x + (1.0 - ab).sqrt() * e).collect();
        Ok(Tensor::new(x0.shape(), data)?)
    }

    /// Draws `x_t ~ q(x_t | x_{t-1})`, one application of the step kernel.
    pub fn forward_step<R: Rng + ?Sized>(&self, x_prev: &Tensor, t: usize, rng: &mut R) -> Result<Tensor, EdmError> {
        self.check_t(t)?;
        let beta = self.betas[t - 1];
        let eps = Tensor::randn(x_prev.shape(), 1.0, rng);
        let data = x_prev.data().iter().zip(eps.data()).map(|(x, e)| (1.0 - beta).sqrt() * x + beta.sqrt() * e).collect();
        Ok(Tensor::new(x_prev.shape(), data)?)
    }

    /// Mean coefficients `(a, b)` and variance of `q(x_{t-1} | x_t, x_0) =
    /// N(a·x_0 + b·x_t, var)`, for `t ≥ 2`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64, f64), EdmError> {
        self.check_t(t)?;
        if t < 2 {
            return Err(EdmError::InvalidArgument("the posterior is defined for t >= 2".into()));
        }
        let beta = self.betas[t - 1];
        let ab = self.alpha_bars[t - 1];
        let ab_prev = self.alpha_bars[t - 2];
        let a = ab_prev.sqrt() * beta / (1.0 - ab);
        let b = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * beta;
        Ok((a, b, var))
    }
}
