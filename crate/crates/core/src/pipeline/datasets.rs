use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{PipelineError, Task, TrainingPair};
use crate::raster::{extract_patches, linear_upsample, max_coarsen, PrecipGrid, RasterError};

fn source_id(g: &PrecipGrid, index: usize) -> String {
    format!("t{}#{index}", g.timestamp())
}

/// Pairs satellite grids with radar grids by timestamp. The residual is
/// `max_coarsen(radar) − sat` at satellite resolution; both fields are cut
/// into `patch_size` tiles.
pub fn build_correction_dataset(
    sat: &[PrecipGrid],
    radar: &[PrecipGrid],
    factor: usize,
    patch_size: usize,
    stride: usize,
) -> Result<Vec<TrainingPair>, PipelineError> {
    if sat.len() != radar.len() {
        return Err(PipelineError::Pairing(format!("{} satellite vs {} radar grids", sat.len(), radar.len())));
    }
    let mut out = Vec::new();
    for (i, (s, r)) in sat.iter().zip(radar).enumerate() {
        if s.timestamp() != r.timestamp() {
            return Err(PipelineError::Pairing(format!(
                "event {i}: satellite timestamp {} vs radar {}",
                s.timestamp(),
                r.timestamp()
            )));
        }
        let lr = max_coarsen(r, factor)?;
        if lr.shape() != s.shape() {
            return Err(PipelineError::Alignment(format!(
                "event {i}: coarsened radar is {:?}, satellite is {:?}",
                lr.shape(),
                s.shape()
            )));
        }
        let residual = lr.zip_with(s, |a, b| a - b)?;
        let conds = extract_patches(s, patch_size, stride)?;
        let targets = extract_patches(&residual, patch_size, stride)?;
        for (k, (c, t)) in conds.into_iter().zip(targets).enumerate() {
            out.push(TrainingPair {
                cond: c.grid,
                target_residual: t.grid,
                task: Task::Correction,
                source_id: format!("{}@{},{}#{k}", source_id(s, i), c.row_off, c.col_off),
            });
        }
    }
    Ok(out)
}

/// Full-frame pairs: `cond = linear_upsample(max_coarsen(radar))` and
/// `residual = radar − cond`.
pub fn build_downscale_dataset(radar: &[PrecipGrid], factor: usize) -> Result<Vec<TrainingPair>, PipelineError> {
    radar
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let cond = linear_upsample(&max_coarsen(r, factor)?, factor)?.with_meta(*r.meta());
            let residual = r.zip_with(&cond, |a, b| a - b)?;
            Ok(TrainingPair { cond, target_residual: residual, task: Task::Downscale, source_id: source_id(r, i) })
        })
        .collect()
}

/// Share of non-missing cells with zero precipitation.
pub fn zero_fraction(grid: &PrecipGrid) -> Result<f64, RasterError> {
    let valid = grid.valid_count();
    if valid == 0 {
        return Err(RasterError::EmptyRegion);
    }
    Ok(grid.values().iter().filter(|&&v| v == 0.0).count() as f64 / valid as f64)
}

/// Whether each grid's zero fraction is at most `zero_fraction_max`
/// (inclusive). All-missing grids count as fully dry.
pub fn rain_event_mask(grids: &[PrecipGrid], zero_fraction_max: f64) -> Result<Vec<bool>, PipelineError> {
    if !(0.0..=1.0).contains(&zero_fraction_max) {
        return Err(PipelineError::InvalidArgument(format!("zero-fraction threshold {zero_fraction_max}")));
    }
    Ok(grids.iter().map(|g| zero_fraction(g).unwrap_or(1.0) <= zero_fraction_max).collect())
}

/// The grids selected by [`rain_event_mask`].
pub fn filter_rain_events(grids: &[PrecipGrid], zero_fraction_max: f64) -> Result<Vec<PrecipGrid>, PipelineError> {
    let mask = rain_event_mask(grids, zero_fraction_max)?;
    Ok(grids.iter().zip(mask).filter(|(_, keep)| *keep).map(|(g, _)| g.clone()).collect())
}

/// Seeded shuffle, then the first `round(train_fraction·n)` items train.
pub fn split_train_test<T: Clone>(dataset: &[T], train_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), PipelineError> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(PipelineError::InvalidArgument(format!("train fraction {train_fraction} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (train_fraction * dataset.len() as f64).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| dataset[i].clone()).collect::<Vec<T>>();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}
