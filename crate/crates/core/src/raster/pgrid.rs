//! PGRID binary grids.
//!
//! Little-endian layout: magic `PGRID1\0`, `u16` version, `u32` rows, `u32`
//! cols, `f64` cell size (km), `f64` origin latitude, `f64` origin longitude,
//! `i64` timestamp, `rows·cols` `f32` values in row-major order, then a `u64`
//! CRC-64/XZ over all preceding bytes.
//!
//! Values are stored as `f32`. Grids whose values are exactly representable in
//! `f32` (see [`PrecipGrid::round_to_f32`]) round-trip bit-exactly, NaN payloads
//! included.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{GridMeta, PrecipGrid, RasterError};
use crate::crc64;

pub const PGRID_MAGIC: &[u8; 7] = b"PGRID1\0";
pub const PGRID_VERSION: u16 = 1;
const HEADER_LEN: usize = 7 + 2 + 4 + 4 + 8 * 4;

// Explicit NaN narrowing so payload bits survive the f64 -> f32 -> f64 trip.
fn to_f32_bits(v: f64) -> u32 {
    if v.is_nan() {
        let b = v.to_bits();
        let sign = ((b >> 63) as u32) << 31;
        let payload = ((b >> 29) & 0x007f_ffff) as u32;
        sign | 0x7f80_0000 | if payload == 0 { 0x0040_0000 } else { payload }
    } else {
        (v as f32).to_bits()
    }
}

fn from_f32_bits(b: u32) -> f64 {
    let f = f32::from_bits(b);
    if f.is_nan() {
        let sign = ((b >> 31) as u64) << 63;
        f64::from_bits(sign | 0x7ff0_0000_0000_0000 | (((b & 0x007f_ffff) as u64) << 29))
    } else {
        f as f64
    }
}

pub fn encode_pgrid(grid: &PrecipGrid) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + grid.values().len() * 4 + 8);
    let m = grid.meta();
    buf.extend_from_slice(PGRID_MAGIC);
    buf.extend_from_slice(&PGRID_VERSION.to_le_bytes());
    buf.extend_from_slice(&(grid.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(grid.cols() as u32).to_le_bytes());
    for v in [m.cell_size_km, m.origin_lat, m.origin_lon] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&m.timestamp.to_le_bytes());
    for &v in grid.values() {
        buf.extend_from_slice(&to_f32_bits(v).to_le_bytes());
    }
    let crc = crc64::checksum(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

fn field<const N: usize>(bytes: &[u8], pos: &mut usize) -> Result<[u8; N], RasterError> {
    let end = *pos + N;
    let s = bytes.get(*pos..end).ok_or(RasterError::Truncated(bytes.len()))?;
    *pos = end;
    Ok(s.try_into().unwrap())
}

pub fn decode_pgrid(bytes: &[u8]) -> Result<PrecipGrid, RasterError> {
    let n = bytes.len().min(PGRID_MAGIC.len());
    if bytes[..n] != PGRID_MAGIC[..n] {
        return Err(RasterError::BadMagic);
    }
    let mut pos = PGRID_MAGIC.len();
    if bytes.len() < HEADER_LEN {
        return Err(RasterError::Truncated(bytes.len()));
    }
    let version = u16::from_le_bytes(field(bytes, &mut pos)?);
    if version != PGRID_VERSION {
        return Err(RasterError::UnsupportedVersion(version));
    }
    let rows = u32::from_le_bytes(field(bytes, &mut pos)?) as usize;
    let cols = u32::from_le_bytes(field(bytes, &mut pos)?) as usize;
    let cell_size_km = f64::from_le_bytes(field(bytes, &mut pos)?);
    let origin_lat = f64::from_le_bytes(field(bytes, &mut pos)?);
    let origin_lon = f64::from_le_bytes(field(bytes, &mut pos)?);
    let timestamp = i64::from_le_bytes(field(bytes, &mut pos)?);
    let expected = (rows as u64) * (cols as u64) * 4 + HEADER_LEN as u64 + 8;
    if (bytes.len() as u64) < expected {
        return Err(RasterError::Truncated(bytes.len()));
    }
    let body = bytes.len() - 8;
    let stored = u64::from_le_bytes(bytes[body..].try_into().unwrap());
    let computed = crc64::checksum(&bytes[..body]);
    if stored != computed {
        return Err(RasterError::CrcMismatch { stored, computed });
    }
    if bytes.len() as u64 != expected {
        return Err(RasterError::InvalidShape(format!("{} trailing bytes", bytes.len() as u64 - expected)));
    }
    let values =
        bytes[HEADER_LEN..body].chunks_exact(4).map(|c| from_f32_bits(u32::from_le_bytes(c.try_into().unwrap()))).collect();
    PrecipGrid::signed(rows, cols, values, GridMeta { cell_size_km, origin_lat, origin_lon, timestamp })
}

pub fn write_pgrid(grid: &PrecipGrid, path: impl AsRef<Path>) -> Result<(), RasterError> {
    fs::write(path, encode_pgrid(grid))?;
    Ok(())
}

pub fn read_pgrid(path: impl AsRef<Path>) -> Result<PrecipGrid, RasterError> {
    decode_pgrid(&fs::read(path)?)
}

/// `row,col,value` lines with a header; missing cells are written as `NaN`.
pub fn write_csv<W: Write>(grid: &PrecipGrid, mut out: W) -> Result<(), RasterError> {
    writeln!(out, "row,col,value")?;
    for r in 0..grid.rows() {
        for c in 0..grid.cols() {
            writeln!(out, "{r},{c},{}", grid.get(r, c))?;
        }
    }
    Ok(())
}
