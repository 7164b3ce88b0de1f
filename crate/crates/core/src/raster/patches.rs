use super::{GridMeta, PrecipGrid, RasterError};

#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub grid: PrecipGrid,
    pub row_off: usize,
    pub col_off: usize,
}

/// Offsets `0, stride, 2·stride, …` plus a final offset flush with the far edge.
fn offsets(n: usize, size: usize, stride: usize) -> Vec<usize> {
    let mut v: Vec<usize> = (0..).map(|k| k * stride).take_while(|o| o + size <= n).collect();
    if v.last().is_none_or(|&o| o + size < n) {
        v.push(n - size);
    }
    v
}

/// Square `size × size` tiles in raster order. The last row and column of
/// tiles are shifted inward so every cell is covered.
pub fn extract_patches(grid: &PrecipGrid, size: usize, stride: usize) -> Result<Vec<Patch>, RasterError> {
    let (rows, cols) = grid.shape();
    if size == 0 || stride == 0 {
        return Err(RasterError::InvalidArgument("patch size and stride must be >= 1".into()));
    }
    if size > rows.min(cols) {
        return Err(RasterError::InvalidArgument(format!("patch size {size} exceeds {rows}x{cols} grid")));
    }
    let mut out = Vec::new();
    for &r0 in &offsets(rows, size, stride) {
        for &c0 in &offsets(cols, size, stride) {
            let mut values = Vec::with_capacity(size * size);
            for r in r0..r0 + size {
                values.extend_from_slice(&grid.values()[r * cols + c0..r * cols + c0 + size]);
            }
            out.push(Patch { grid: PrecipGrid::from_parts(size, size, values, *grid.meta()), row_off: r0, col_off: c0 });
        }
    }
    Ok(out)
}

/// Reassembles patches into a `rows × cols` grid, averaging overlaps.
pub fn stitch_patches(patches: &[Patch], rows: usize, cols: usize, meta: GridMeta) -> Result<PrecipGrid, RasterError> {
    if rows == 0 || cols == 0 {
        return Err(RasterError::InvalidShape(format!("{rows}x{cols} grid")));
    }
    let mut sum = vec![0.0; rows * cols];
    let mut count = vec![0u32; rows * cols];
    for p in patches {
        let (pr, pc) = p.grid.shape();
        if p.row_off + pr > rows || p.col_off + pc > cols {
            return Err(RasterError::InvalidArgument(format!(
                "{pr}x{pc} patch at ({}, {}) exceeds {rows}x{cols} grid",
                p.row_off, p.col_off
            )));
        }
        for r in 0..pr {
            for c in 0..pc {
                let i = (p.row_off + r) * cols + p.col_off + c;
                sum[i] += p.grid.get(r, c);
                count[i] += 1;
            }
        }
    }
    if let Some(i) = count.iter().position(|&n| n == 0) {
        return Err(RasterError::Coverage { row: i / cols, col: i % cols });
    }
    let values = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
    PrecipGrid::signed(rows, cols, values, meta)
}
