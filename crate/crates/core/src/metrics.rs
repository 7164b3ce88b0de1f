//! Verification metrics: RMSE, CRPS, Pearson correlation, SSIM and
//! intensity-binned error distributions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::PrecipGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("no cell is valid in both fields")]
    EmptyComparison,
    #[error("correlation undefined: {0} has zero variance")]
    UndefinedCorrelation(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("precondition failed: {0}")]
    Precondition(String),
}

fn check_shapes(a: &PrecipGrid, b: &PrecipGrid) -> Result<(), MetricsError> {
    if a.shape() != b.shape() {
        return Err(MetricsError::ShapeMismatch(a.shape(), b.shape()));
    }
    Ok(())
}

/// Cells valid in both fields, as `(pred, truth)`.
fn valid_pairs<'a>(pred: &'a PrecipGrid, truth: &'a PrecipGrid) -> impl Iterator<Item = (f64, f64)> + Clone + 'a {
    pred.values().iter().zip(truth.values()).map(|(&p, &t)| (p, t)).filter(|(p, t)| !p.is_nan() && !t.is_nan())
}

/// Running sums shared by the single-pair and pooled metrics.
#[derive(Clone, Debug, Default)]
struct Moments {
    n: usize,
    sq: f64,
    abs: f64,
}

impl Moments {
    fn add_pair(&mut self, pred: &PrecipGrid, truth: &PrecipGrid) {
        for (p, t) in valid_pairs(pred, truth) {
            let d = p - t;
            self.n += 1;
            self.sq += d * d;
            self.abs += d.abs();
        }
    }

    fn rmse(&self) -> Result<f64, MetricsError> {
        if self.n == 0 {
            return Err(MetricsError::EmptyComparison);
        }
        Ok((self.sq / self.n as f64).sqrt())
    }

    fn mae(&self) -> Result<f64, MetricsError> {
        if self.n == 0 {
            return Err(MetricsError::EmptyComparison);
        }
        Ok(self.abs / self.n as f64)
    }
}

fn moments(pred: &PrecipGrid, truth: &PrecipGrid) -> Result<Moments, MetricsError> {
    check_shapes(pred, truth)?;
    let mut m = Moments::default();
    m.add_pair(pred, truth);
    Ok(m)
}

pub fn rmse(pred: &PrecipGrid, truth: &PrecipGrid) -> Result<f64, MetricsError> {
    moments(pred, truth)?.rmse()
}

/// CRPS of a deterministic forecast, which is the mean absolute error.
pub fn crps_deterministic(pred: &PrecipGrid, truth: &PrecipGrid) -> Result<f64, MetricsError> {
    moments(pred, truth)?.mae()
}

/// Empirical ensemble CRPS, `mean|x_i − y| − ½·mean|x_i − x_j|`, averaged
/// over cells where truth and every member are valid.
pub fn crps_ensemble(samples: &[PrecipGrid], truth: &PrecipGrid) -> Result<f64, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::Precondition("empty ensemble".into()));
    }
    for s in samples {
        check_shapes(s, truth)?;
    }
    let m = samples.len() as f64;
    let (mut total, mut n) = (0.0, 0usize);
    let mut xs = Vec::with_capacity(samples.len());
    for (i, &y) in truth.values().iter().enumerate() {
        xs.clear();
        xs.extend(samples.iter().map(|s| s.values()[i]));
        if y.is_nan() || xs.iter().any(|x| x.is_nan()) {
            continue;
        }
        let skill = xs.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
        let spread = xs.iter().flat_map(|a| xs.iter().map(move |b| (a - b).abs())).sum::<f64>() / (m * m);
        total += skill - 0.5 * spread;
        n += 1;
    }
    if n == 0 {
        return Err(MetricsError::EmptyComparison);
    }
    Ok(total / n as f64)
}

fn pearson_from_pairs(pairs: impl Iterator<Item = (f64, f64)> + Clone) -> Result<f64, MetricsError> {
    let (mut n, mut sp, mut st) = (0usize, 0.0, 0.0);
    for (p, t) in pairs.clone() {
        n += 1;
        sp += p;
        st += t;
    }
    if n == 0 {
        return Err(MetricsError::EmptyComparison);
    }
    let (mp, mt) = (sp / n as f64, st / n as f64);
    let (mut spp, mut stt, mut spt) = (0.0, 0.0, 0.0);
    for (p, t) in pairs {
        spp += (p - mp) * (p - mp);
        stt += (t - mt) * (t - mt);
        spt += (p - mp) * (t - mt);
    }
    if spp == 0.0 {
        return Err(MetricsError::UndefinedCorrelation("prediction"));
    }
    if stt == 0.0 {
        return Err(MetricsError::UndefinedCorrelation("truth"));
    }
    Ok((spt / (spp.sqrt() * stt.sqrt())).clamp(-1.0, 1.0))
}

pub fn pearson_cc(pred: &PrecipGrid, truth: &PrecipGrid) -> Result<f64, MetricsError> {
    check_shapes(pred, truth)?;
    pearson_from_pairs(valid_pairs(pred, truth))
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Largest valid value in either field, floored at 1 mm/h.
pub fn default_data_range(pred: &PrecipGrid, truth: &PrecipGrid) -> f64 {
    pred.max_value().into_iter().chain(truth.max_value()).fold(1.0, f64::max)
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
fn gaussian_taps(window: usize) -> Vec<f64> {
    let half = (window / 2) as f64;
    let taps: Vec<f64> = (0..window).map(|i| (-((i as f64 - half).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Sum and count of local SSIM over every fully interior window free of
/// missing cells.
fn ssim_sums(pred: &PrecipGrid, truth: &PrecipGrid, window: usize, data_range: f64) -> Result<(f64, usize), MetricsError> {
    check_shapes(pred, truth)?;
    let (rows, cols) = pred.shape();
    if window == 0 || window.is_multiple_of(2) {
        return Err(MetricsError::InvalidArgument(format!("SSIM window {window} must be odd")));
    }
    if window > rows.min(cols) {
        return Err(MetricsError::InvalidArgument(format!("SSIM window {window} exceeds {rows}x{cols} grid")));
    }
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(MetricsError::InvalidArgument(format!("data range {data_range}")));
    }
    let taps = gaussian_taps(window);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let (x, y) = (pred.values(), truth.values());
    let (mut total, mut count) = (0.0, 0usize);
    for r0 in 0..=rows - window {
        'win: for c0 in 0..=cols - window {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (a, wa) in taps.iter().enumerate() {
                for (b, wb) in taps.iter().enumerate() {
                    let i = (r0 + a) * cols + c0 + b;
                    let (u, v) = (x[i], y[i]);
                    if u.is_nan() || v.is_nan() {
                        continue 'win;
                    }
                    let w = wa * wb;
                    mx += w * u;
                    my += w * v;
                    sxx += w * u * u;
                    syy += w * v * v;
                    sxy += w * u * v;
                }
            }
            let vx = sxx - mx * mx;
            let vy = syy - my * my;
            let cov = sxy - mx * my;
            total += ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok((total, count))
}

/// Mean local SSIM over Gaussian-weighted windows (std 1.5).
pub fn ssim(pred: &PrecipGrid, truth: &PrecipGrid, window: usize, data_range: f64) -> Result<f64, MetricsError> {
    match ssim_sums(pred, truth, window, data_range)? {
        (_, 0) => Err(MetricsError::EmptyComparison),
        (s, n) => Ok(s / n as f64),
    }
}

pub const DEFAULT_BIN_EDGES: [f64; 9] = [0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, f64::INFINITY];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinError {
    pub bin_low: f64,
    pub bin_high: f64,
    /// Mean of `pred − truth`; 0 for an empty bin.
    pub mean_error: f64,
    /// Population standard deviation of `pred − truth`.
    pub std_error: f64,
    pub count: usize,
}

/// Which cells enter the error distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum BinMode {
    /// Every cell valid in both fields.
    Flatten,
    /// One randomly chosen cell per `factor × factor` block.
    Neighborhood { factor: usize, seed: u64 },
}

#[derive(Clone, Debug)]
struct BinAccumulator {
    edges: Vec<f64>,
    sum: Vec<f64>,
    sq: Vec<f64>,
    count: Vec<usize>,
}

impl BinAccumulator {
    fn new(edges: &[f64]) -> Result<Self, MetricsError> {
        if edges.len() < 2 || edges.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(MetricsError::InvalidArgument(format!("bin edges {edges:?} must be increasing")));
        }
        let k = edges.len() - 1;
        Ok(Self { edges: edges.to_vec(), sum: vec![0.0; k], sq: vec![0.0; k], count: vec![0; k] })
    }

    fn push(&mut self, p: f64, t: f64) {
        if p.is_nan() || t.is_nan() {
            return;
        }
        // Half-open bins [low, high).
        let k = self.edges.partition_point(|&e| e <= t);
        if k == 0 || k == self.edges.len() {
            return;
        }
        let d = p - t;
        self.sum[k - 1] += d;
        self.sq[k - 1] += d * d;
        self.count[k - 1] += 1;
    }

    fn add_pair(&mut self, pred: &PrecipGrid, truth: &PrecipGrid, mode: BinMode, pair_index: usize) -> Result<(), MetricsError> {
        match mode {
            BinMode::Flatten => valid_pairs(pred, truth).for_each(|(p, t)| self.push(p, t)),
            BinMode::Neighborhood { factor, seed } => {
                let (rows, cols) = pred.shape();
                if factor == 0 || rows % factor != 0 || cols % factor != 0 {
                    return Err(MetricsError::InvalidArgument(format!(
                        "{rows}x{cols} grid is not divisible into {factor}x{factor} blocks"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(pair_index as u64));
                for br in 0..rows / factor {
                    for bc in 0..cols / factor {
                        let r = br * factor + rng.random_range(0..factor);
                        let c = bc * factor + rng.random_range(0..factor);
                        self.push(pred.get(r, c), truth.get(r, c));
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(&self) -> Vec<BinError> {
        (0..self.count.len())
            .map(|k| {
                let n = self.count[k];
                let (mean, std) = if n == 0 {
                    (0.0, 0.0)
                } else {
                    let mean = self.sum[k] / n as f64;
                    (mean, (self.sq[k] / n as f64 - mean * mean).max(0.0).sqrt())
                };
                BinError { bin_low: self.edges[k], bin_high: self.edges[k + 1], mean_error: mean, std_error: std, count: n }
            })
            .collect()
    }
}

/// Mean, spread and count of `pred − truth` per truth-intensity bin.
pub fn error_distribution(
    pred: &PrecipGrid,
    truth: &PrecipGrid,
    bin_edges: &[f64],
    mode: BinMode,
) -> Result<Vec<BinError>, MetricsError> {
    check_shapes(pred, truth)?;
    let mut acc = BinAccumulator::new(bin_edges)?;
    acc.add_pair(pred, truth, mode, 0)?;
    Ok(acc.finish())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub ssim_window: usize,
    /// `None` uses the larger maximum of the two fields, floored at 1 mm/h.
    pub data_range: Option<f64>,
    pub bin_edges: Vec<f64>,
    pub bin_mode: BinMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { ssim_window: SSIM_WINDOW, data_range: None, bin_edges: DEFAULT_BIN_EDGES.to_vec(), bin_mode: BinMode::Flatten }
    }
}

/// All metrics for one comparison. Metrics that are undefined for the
/// inputs are `None`, with the reason in the matching `*_error` field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rmse: f64,
    pub crps: f64,
    pub cc: Option<f64>,
    pub cc_error: Option<String>,
    pub ssim: Option<f64>,
    pub ssim_error: Option<String>,
    pub n_pixels: usize,
    pub per_bin_errors: Vec<BinError>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-bin table; an infinite upper edge is written as `inf`.
    pub fn bins_csv(&self) -> String {
        let mut out = String::from("bin_low,bin_high,mean_err,std_err,count\n");
        for b in &self.per_bin_errors {
            out.push_str(&format!("{},{},{},{},{}\n", b.bin_low, b.bin_high, b.mean_error, b.std_error, b.count));
        }
        out
    }
}

/// Pools every pixel of every `(pred, truth)` pair: RMSE, CRPS, CC and bins
/// are computed over the union, SSIM averages all windows of all pairs.
pub fn evaluate_pooled(pairs: &[(PrecipGrid, PrecipGrid)], config: &EvalConfig) -> Result<EvalReport, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::Precondition("no grid pairs to evaluate".into()));
    }
    let mut m = Moments::default();
    let mut bins = BinAccumulator::new(&config.bin_edges)?;
    let (mut ssim_total, mut ssim_count, mut ssim_err) = (0.0, 0usize, None);
    for (i, (p, t)) in pairs.iter().enumerate() {
        check_shapes(p, t)?;
        m.add_pair(p, t);
        bins.add_pair(p, t, config.bin_mode, i)?;
        if ssim_err.is_none() {
            let range = config.data_range.unwrap_or_else(|| default_data_range(p, t));
            match ssim_sums(p, t, config.ssim_window, range) {
                Ok((s, n)) => {
                    ssim_total += s;
                    ssim_count += n;
                }
                Err(e) => ssim_err = Some(e.to_string()),
            }
        }
    }
    let rmse = m.rmse()?;
    let crps = m.mae()?;
    let pooled = pairs.iter().flat_map(|(p, t)| valid_pairs(p, t));
    let (cc, cc_error) = match pearson_from_pairs(pooled) {
        Ok(v) => (Some(v), None),
        Err(e) => (None, Some(e.to_string())),
    };
    let (ssim, ssim_error) = match (ssim_err, ssim_count) {
        (Some(e), _) => (None, Some(e)),
        (None, 0) => (None, Some(MetricsError::EmptyComparison.to_string())),
        (None, n) => (Some(ssim_total / n as f64), None),
    };
    Ok(EvalReport { rmse, crps, cc, cc_error, ssim, ssim_error, n_pixels: m.n, per_bin_errors: bins.finish() })
}

pub fn evaluate_suite(pred: &PrecipGrid, truth: &PrecipGrid, config: &EvalConfig) -> Result<EvalReport, MetricsError> {
    evaluate_pooled(&[(pred.clone(), truth.clone())], config)
}
