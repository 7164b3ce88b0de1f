//! Coarsening and upsampling with cell-center alignment.
//!
//! Output cell `i` of an upsampled axis sits at input coordinate
//! `(i + 0.5) / factor - 0.5`; coordinates outside `[0, n - 1]` are clamped,
//! which replicates the edge cells.

use super::{GridMeta, PrecipGrid, RasterError};

fn check_factor(factor: usize) -> Result<(), RasterError> {
    if factor == 0 {
        return Err(RasterError::InvalidArgument("factor must be >= 1".into()));
    }
    Ok(())
}

fn coarsen(grid: &PrecipGrid, factor: usize, reduce: fn(&[f64]) -> f64) -> Result<PrecipGrid, RasterError> {
    check_factor(factor)?;
    let (rows, cols) = grid.shape();
    if rows % factor != 0 || cols % factor != 0 {
        let pad = |n: usize| (factor - n % factor) % factor;
        return Err(RasterError::InvalidShape(format!(
            "{rows}x{cols} grid is not divisible by factor {factor}; pad by {} rows and {} cols",
            pad(rows),
            pad(cols)
        )));
    }
    let (orows, ocols) = (rows / factor, cols / factor);
    let mut block = Vec::with_capacity(factor * factor);
    let mut out = Vec::with_capacity(orows * ocols);
    for br in 0..orows {
        for bc in 0..ocols {
            block.clear();
            for r in br * factor..(br + 1) * factor {
                let row = &grid.values()[r * cols + bc * factor..r * cols + (bc + 1) * factor];
                block.extend(row.iter().copied().filter(|v| !v.is_nan()));
            }
            out.push(if block.is_empty() { f64::NAN } else { reduce(&block) });
        }
    }
    let meta = GridMeta { cell_size_km: grid.cell_size_km() * factor as f64, ..*grid.meta() };
    Ok(PrecipGrid::from_parts(orows, ocols, out, meta))
}

/// Block maximum; missing cells are skipped unless the whole block is missing.
pub fn max_coarsen(grid: &PrecipGrid, factor: usize) -> Result<PrecipGrid, RasterError> {
    coarsen(grid, factor, |b| b.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Block mean over non-missing cells.
pub fn mean_coarsen(grid: &PrecipGrid, factor: usize) -> Result<PrecipGrid, RasterError> {
    coarsen(grid, factor, |b| b.iter().sum::<f64>() / b.len() as f64)
}

/// Source coordinate of output cell `i`, clamped to the valid range.
fn source_coord(i: usize, factor: usize, n: usize) -> f64 {
    ((i as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (n - 1) as f64)
}

fn upsampled_meta(grid: &PrecipGrid, factor: usize) -> GridMeta {
    GridMeta { cell_size_km: grid.cell_size_km() / factor as f64, ..*grid.meta() }
}

/// Weighted average over non-missing taps, renormalized by the surviving
/// weight. NaN when no tap survives or the surviving weight vanishes.
fn blend(taps: impl Iterator<Item = (f64, f64)>) -> f64 {
    let (mut acc, mut wsum, mut missing) = (0.0, 0.0, false);
    for (v, w) in taps {
        if v.is_nan() {
            missing |= w != 0.0;
        } else {
            acc += w * v;
            wsum += w;
        }
    }
    if !missing {
        acc
    } else if wsum.abs() > 1e-9 {
        acc / wsum
    } else {
        f64::NAN
    }
}

fn bilinear_at(grid: &PrecipGrid, y: f64, x: f64) -> f64 {
    let (rows, cols) = grid.shape();
    let (r0, c0) = (y.floor() as usize, x.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(rows - 1), (c0 + 1).min(cols - 1));
    let (ty, tx) = (y - r0 as f64, x - c0 as f64);
    blend(
        [
            (grid.get(r0, c0), (1.0 - ty) * (1.0 - tx)),
            (grid.get(r0, c1), (1.0 - ty) * tx),
            (grid.get(r1, c0), ty * (1.0 - tx)),
            (grid.get(r1, c1), ty * tx),
        ]
        .into_iter(),
    )
}

/// Bilinear interpolation; negatives are clamped to zero.
pub fn linear_upsample(grid: &PrecipGrid, factor: usize) -> Result<PrecipGrid, RasterError> {
    check_factor(factor)?;
    let (rows, cols) = grid.shape();
    let (orows, ocols) = (rows * factor, cols * factor);
    let mut out = Vec::with_capacity(orows * ocols);
    for i in 0..orows {
        let y = source_coord(i, factor, rows);
        for j in 0..ocols {
            out.push(bilinear_at(grid, y, source_coord(j, factor, cols)));
        }
    }
    Ok(PrecipGrid::from_parts(orows, ocols, out, upsampled_meta(grid, factor)).clamp_non_negative())
}

/// Catmull-Rom kernel weights for the four taps around fractional offset `t`.
pub(crate) fn catmull_rom_weights(t: f64) -> [f64; 4] {
    let (t2, t3) = (t * t, t * t * t);
    [0.5 * (-t3 + 2.0 * t2 - t), 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0), 0.5 * (-3.0 * t3 + 4.0 * t2 + t), 0.5 * (t3 - t2)]
}

fn taps(coord: f64, n: usize) -> ([usize; 4], [f64; 4]) {
    let base = coord.floor() as isize;
    let idx = [-1, 0, 1, 2].map(|d| (base + d).clamp(0, n as isize - 1) as usize);
    (idx, catmull_rom_weights(coord - base as f64))
}

/// Catmull-Rom bicubic interpolation with edge replication; negatives are
/// clamped to zero. Stencils touching missing cells fall back to the
/// missing-aware bilinear estimate.
pub fn bicubic_upsample(grid: &PrecipGrid, factor: usize) -> Result<PrecipGrid, RasterError> {
    check_factor(factor)?;
    let (rows, cols) = grid.shape();
    let (orows, ocols) = (rows * factor, cols * factor);
    let mut out = Vec::with_capacity(orows * ocols);
    for i in 0..orows {
        let y = source_coord(i, factor, rows);
        let (ri, rw) = taps(y, rows);
        for j in 0..ocols {
            let x = source_coord(j, factor, cols);
            let (ci, cw) = taps(x, cols);
            let mut v = 0.0;
            let mut missing = false;
            for a in 0..4 {
                let mut row_acc = 0.0;
                for b in 0..4 {
                    let s = grid.get(ri[a], ci[b]);
                    missing |= s.is_nan();
                    row_acc += cw[b] * s;
                }
                v += rw[a] * row_acc;
            }
            if missing {
                v = bilinear_at(grid, y, x);
            }
            out.push(v);
        }
    }
    Ok(PrecipGrid::from_parts(orows, ocols, out, upsampled_meta(grid, factor)).clamp_non_negative())
}
