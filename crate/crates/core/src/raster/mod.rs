//! Georeferenced precipitation grids and the operators applied to them.

mod patches;
mod pgrid;
mod resample;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use patches::{extract_patches, stitch_patches, Patch};
pub use pgrid::{decode_pgrid, encode_pgrid, read_pgrid, write_csv, write_pgrid, PGRID_MAGIC, PGRID_VERSION};
pub use resample::{bicubic_upsample, linear_upsample, max_coarsen, mean_coarsen};

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("cell ({row}, {col}) is not covered by any patch")]
    Coverage { row: usize, col: usize },
    #[error("grid has no non-missing cells")]
    EmptyRegion,
    #[error("grid I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a PGRID file (bad magic)")]
    BadMagic,
    #[error("unsupported PGRID version {0}")]
    UnsupportedVersion(u16),
    #[error("PGRID truncated at byte {0}")]
    Truncated(usize),
    #[error("PGRID CRC mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    CrcMismatch { stored: u64, computed: u64 },
}

/// Georeferencing shared by a grid's cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMeta {
    pub cell_size_km: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Seconds since the Unix epoch, UTC.
    pub timestamp: i64,
}

impl Default for GridMeta {
    fn default() -> Self {
        Self { cell_size_km: 1.0, origin_lat: 0.0, origin_lon: 0.0, timestamp: 0 }
    }
}

impl GridMeta {
    fn validate(&self) -> Result<(), RasterError> {
        if !(self.cell_size_km.is_finite() && self.cell_size_km > 0.0) {
            return Err(RasterError::InvalidValue(format!("cell size {} km", self.cell_size_km)));
        }
        if !self.origin_lat.is_finite() || !self.origin_lon.is_finite() {
            return Err(RasterError::InvalidValue("non-finite origin".into()));
        }
        Ok(())
    }
}

/// Row-major `rows × cols` field in mm/h; NaN marks a missing cell.
///
/// Grids built with [`PrecipGrid::new`] hold precipitation and reject negative
/// values. [`PrecipGrid::signed`] builds signed fields (residuals, errors) that
/// share the same layout and file format.
#[derive(Clone, Debug, PartialEq)]
pub struct PrecipGrid {
    rows: usize,
    cols: usize,
    meta: GridMeta,
    values: Vec<f64>,
}

impl PrecipGrid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, meta: GridMeta) -> Result<Self, RasterError> {
        let g = Self::signed(rows, cols, values, meta)?;
        if let Some(i) = g.values.iter().position(|&v| v < 0.0) {
            return Err(RasterError::InvalidValue(format!(
                "negative precipitation {} at ({}, {})",
                g.values[i],
                i / cols,
                i % cols
            )));
        }
        Ok(g)
    }

    pub fn signed(rows: usize, cols: usize, values: Vec<f64>, meta: GridMeta) -> Result<Self, RasterError> {
        if rows == 0 || cols == 0 {
            return Err(RasterError::InvalidShape(format!("{rows}x{cols} grid")));
        }
        if rows.checked_mul(cols) != Some(values.len()) {
            return Err(RasterError::InvalidShape(format!("{rows}x{cols} grid with {} values", values.len())));
        }
        meta.validate()?;
        if values.iter().any(|v| v.is_infinite()) {
            return Err(RasterError::InvalidValue("infinite cell value".into()));
        }
        Ok(Self { rows, cols, meta, values })
    }

    pub fn filled(rows: usize, cols: usize, value: f64, meta: GridMeta) -> Result<Self, RasterError> {
        Self::new(rows, cols, vec![value; rows.saturating_mul(cols)], meta)
    }

    /// Skips validation; callers guarantee the shape.
    pub(crate) fn from_parts(rows: usize, cols: usize, values: Vec<f64>, meta: GridMeta) -> Self {
        debug_assert_eq!(rows * cols, values.len());
        Self { rows, cols, meta, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn meta(&self) -> &GridMeta {
        &self.meta
    }

    pub fn cell_size_km(&self) -> f64 {
        self.meta.cell_size_km
    }

    pub fn timestamp(&self) -> i64 {
        self.meta.timestamp
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn with_meta(mut self, meta: GridMeta) -> Self {
        self.meta = meta;
        self
    }

    /// Elementwise map; the result is a signed field.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.rows, self.cols, self.values.iter().map(|&v| f(v)).collect(), self.meta)
    }

    /// Elementwise combination of two equally shaped grids, keeping `self`'s metadata.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self, RasterError> {
        if self.shape() != other.shape() {
            return Err(RasterError::InvalidShape(format!("{}x{} vs {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let values = self.values.iter().zip(&other.values).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self::from_parts(self.rows, self.cols, values, self.meta))
    }

    /// Negatives become 0; NaN stays missing.
    pub fn clamp_non_negative(&self) -> Self {
        self.map(|v| if v < 0.0 { 0.0 } else { v })
    }

    /// Rounds every value to the nearest `f32`, the on-disk precision.
    pub fn round_to_f32(&self) -> Self {
        self.map(|v| v as f32 as f64)
    }

    pub fn valid_count(&self) -> usize {
        self.values.iter().filter(|v| !v.is_nan()).count()
    }

    pub fn max_value(&self) -> Option<f64> {
        self.values.iter().copied().filter(|v| !v.is_nan()).reduce(f64::max)
    }
}

/// Fraction of non-missing cells with positive precipitation.
pub fn rain_fraction(grid: &PrecipGrid) -> Result<f64, RasterError> {
    let valid = grid.valid_count();
    if valid == 0 {
        return Err(RasterError::EmptyRegion);
    }
    let wet = grid.values().iter().filter(|&&v| v > 0.0).count();
    Ok(wet as f64 / valid as f64)
}
