//! Synthetic rain events and a satellite-style bias operator.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::raster::{GridMeta, PrecipGrid};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    /// Power spectrum decays as `|k|^-spectral_exponent`.
    pub spectral_exponent: f64,
    /// Quantile of the latent field below which cells are dry.
    pub threshold_quantile: f64,
    /// Rain rate `a·(exp(b·(z − z_q)) − 1)` in mm/h for latent value `z`.
    pub intensity_scale: f64,
    pub intensity_rate: f64,
    pub cell_size_km: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self { spectral_exponent: 6.0, threshold_quantile: 0.5, intensity_scale: 1.0, intensity_rate: 1.2, cell_size_km: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BiasOperatorParams {
    /// Median of the log-normal gain field.
    pub gain_mean: f64,
    /// Standard deviation of the log gain.
    pub gain_log_std: f64,
    /// Correlation length of the gain field, in cells.
    pub gain_corr_len: f64,
    pub intensity_gamma: f64,
    pub smoothing_radius: usize,
    /// Probability that a dry cell receives drizzle.
    pub drizzle_prob: f64,
    /// Mean drizzle rate in mm/h (exponentially distributed).
    pub drizzle_scale: f64,
}

impl Default for BiasOperatorParams {
    fn default() -> Self {
        Self {
            gain_mean: 1.5,
            gain_log_std: 0.1,
            gain_corr_len: 3.0,
            intensity_gamma: 0.85,
            smoothing_radius: 1,
            drizzle_prob: 0.8,
            drizzle_scale: 0.5,
        }
    }
}

impl BiasOperatorParams {
    pub fn identity() -> Self {
        Self {
            gain_mean: 1.0,
            gain_log_std: 0.0,
            gain_corr_len: 1.0,
            intensity_gamma: 1.0,
            smoothing_radius: 0,
            drizzle_prob: 0.0,
            drizzle_scale: 0.0,
        }
    }

    fn validate(&self) -> Result<(), PipelineError> {
        let ok = self.gain_mean > 0.0
            && self.gain_log_std >= 0.0
            && self.gain_corr_len > 0.0
            && self.intensity_gamma > 0.0
            && (0.0..=1.0).contains(&self.drizzle_prob)
            && self.drizzle_scale >= 0.0;
        if !ok {
            return Err(PipelineError::InvalidArgument(format!("bias operator parameters {self:?}")));
        }
        Ok(())
    }
}

fn fft2(data: &mut [Complex<f64>], rows: usize, cols: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row_fft, col_fft) = if inverse {
        (planner.plan_fft_inverse(cols), planner.plan_fft_inverse(rows))
    } else {
        (planner.plan_fft_forward(cols), planner.plan_fft_forward(rows))
    };
    row_fft.process(data);
    let mut column = vec![Complex::default(); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = data[r * cols + c];
        }
        col_fft.process(&mut column);
        for r in 0..rows {
            data[r * cols + c] = column[r];
        }
    }
}

/// Spectral synthesis of a stationary Gaussian field: white noise filtered
/// by `amplitude(|k|)` (k in cycles per cell), standardized to zero mean and
/// unit variance over the grid.
pub fn gaussian_random_field<R: Rng + ?Sized>(rows: usize, cols: usize, amplitude: impl Fn(f64) -> f64, rng: &mut R) -> Vec<f64> {
    let mut buf: Vec<Complex<f64>> = (0..rows * cols).map(|_| Complex::new(rng.sample(StandardNormal), 0.0)).collect();
    fft2(&mut buf, rows, cols, false);
    let freq = |i: usize, n: usize| i.min(n - i) as f64 / n as f64;
    for r in 0..rows {
        for c in 0..cols {
            let k = freq(r, rows).hypot(freq(c, cols));
            buf[r * cols + c] *= amplitude(k);
        }
    }
    fft2(&mut buf, rows, cols, true);
    let n = (rows * cols) as f64;
    let mean = buf.iter().map(|z| z.re).sum::<f64>() / n;
    let std = (buf.iter().map(|z| (z.re - mean).powi(2)).sum::<f64>() / n).sqrt();
    let inv = if std > 1e-12 { 1.0 / std } else { 0.0 };
    buf.iter().map(|z| (z.re - mean) * inv).collect()
}

/// One synthetic high-resolution rain event, rounded to `f32` precision.
pub fn synth_event<R: Rng + ?Sized>(
    rng: &mut R,
    rows: usize,
    cols: usize,
    params: &SynthParams,
    timestamp: i64,
) -> Result<PrecipGrid, PipelineError> {
    if rows < 16 || cols < 16 {
        return Err(PipelineError::InvalidArgument(format!("synthetic events need at least 16x16 cells, got {rows}x{cols}")));
    }
    if !(0.0..=1.0).contains(&params.threshold_quantile) || params.intensity_scale < 0.0 || params.spectral_exponent < 0.0 {
        return Err(PipelineError::InvalidArgument(format!("synthesis parameters {params:?}")));
    }
    let beta = params.spectral_exponent;
    let z = gaussian_random_field(rows, cols, |k| if k == 0.0 { 0.0 } else { k.powf(-beta / 2.0) }, rng);
    let mut sorted = z.clone();
    sorted.sort_by(f64::total_cmp);
    // Exactly round(n·q) cells fall at or below the threshold and stay dry.
    let dry = (z.len() as f64 * params.threshold_quantile).round() as usize;
    let zq = if dry == 0 { f64::NEG_INFINITY } else { sorted[dry - 1] };
    let values = z
        .iter()
        .map(|&v| if v > zq { params.intensity_scale * (params.intensity_rate * (v - zq)).exp_m1() } else { 0.0 })
        .map(|v| v as f32 as f64)
        .collect();
    let meta = GridMeta { cell_size_km: params.cell_size_km, timestamp, ..GridMeta::default() };
    Ok(PrecipGrid::new(rows, cols, values, meta)?)
}

/// Box mean over the `(2r+1)²` neighborhood, clipped at the edges and
/// skipping missing cells.
fn box_smooth(values: &[f64], rows: usize, cols: usize, r: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    for i in 0..rows {
        for j in 0..cols {
            if values[i * cols + j].is_nan() {
                out.push(f64::NAN);
                continue;
            }
            let (mut s, mut n) = (0.0, 0usize);
            for a in i.saturating_sub(r)..(i + r + 1).min(rows) {
                for b in j.saturating_sub(r)..(j + r + 1).min(cols) {
                    let v = values[a * cols + b];
                    if !v.is_nan() {
                        s += v;
                        n += 1;
                    }
                }
            }
            out.push(s / n as f64);
        }
    }
    out
}

/// Synthetic satellite view of a low-resolution truth field:
/// `gain(x, y)·v^γ`, then a box smooth, then drizzle on dry cells.
/// Output is rounded to `f32` precision.
pub fn apply_bias<R: Rng + ?Sized>(
    truth_lr: &PrecipGrid,
    params: &BiasOperatorParams,
    rng: &mut R,
) -> Result<PrecipGrid, PipelineError> {
    params.validate()?;
    let (rows, cols) = truth_lr.shape();
    let ell = params.gain_corr_len;
    let z = gaussian_random_field(rows, cols, |k| (-2.0 * (std::f64::consts::PI * k * ell).powi(2)).exp(), rng);
    let distorted: Vec<f64> = truth_lr
        .values()
        .iter()
        .zip(&z)
        .map(|(&v, &zv)| params.gain_mean * (params.gain_log_std * zv).exp() * v.powf(params.intensity_gamma))
        .collect();
    let mut out =
        if params.smoothing_radius > 0 { box_smooth(&distorted, rows, cols, params.smoothing_radius) } else { distorted };
    for v in out.iter_mut() {
        let hit = rng.random::<f64>() < params.drizzle_prob;
        let amount: f64 = rng.sample(Exp1);
        if hit && *v == 0.0 {
            *v = params.drizzle_scale * amount;
        }
    }
    let values = out.into_iter().map(|v| if v < 0.0 { 0.0 } else { v as f32 as f64 }).collect();
    Ok(PrecipGrid::new(rows, cols, values, *truth_lr.meta())?)
}
