use serde::{Deserialize, Serialize};

use super::PipelineError;
use crate::raster::PrecipGrid;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AffineFit {
    pub a: f64,
    pub b: f64,
}

/// Global least squares `hr ≈ a·cond + b` over every pixel valid in both
/// fields of every `(cond, hr)` pair.
pub fn affine_baseline_fit(train: &[(PrecipGrid, PrecipGrid)]) -> Result<AffineFit, PipelineError> {
    if train.len() < 2 {
        return Err(PipelineError::InvalidArgument(format!("affine fit needs >= 2 pairs, got {}", train.len())));
    }
    let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
    for (c, h) in train {
        if c.shape() != h.shape() {
            return Err(PipelineError::Alignment(format!("{:?} vs {:?}", c.shape(), h.shape())));
        }
        for (&x, &y) in c.values().iter().zip(h.values()) {
            if !x.is_nan() && !y.is_nan() {
                n += 1.0;
                sx += x;
                sy += y;
            }
        }
    }
    if n == 0.0 {
        return Err(PipelineError::SingularFit);
    }
    let (mx, my) = (sx / n, sy / n);
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for (c, h) in train {
        for (&x, &y) in c.values().iter().zip(h.values()) {
            if !x.is_nan() && !y.is_nan() {
                sxx += (x - mx) * (x - mx);
                sxy += (x - mx) * (y - my);
            }
        }
    }
    if sxx <= 1e-12 * n * (1.0 + mx * mx) {
        return Err(PipelineError::SingularFit);
    }
    let a = sxy / sxx;
    Ok(AffineFit { a, b: my - a * mx })
}

pub fn affine_baseline_apply(grid: &PrecipGrid, fit: AffineFit) -> PrecipGrid {
    grid.map(|v| fit.a * v + fit.b).clamp_non_negative()
}
