//! `PDCKPT1` parameter checkpoints.
//!
//! Layout (little-endian): the 7-byte magic `PDCKPT1`, then one record per
//! parameter: `u32` name length, UTF-8 name, `u32` rank, `u64` per dimension,
//! `f64` values. Last comes a `u64` CRC-64 over every preceding byte.

use std::fs;
use std::path::Path;

use thiserror::Error;

use super::{ParamStore, Tensor};
use crate::crc64;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"PDCKPT1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a PDCKPT1 checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint truncated at byte {0}")]
    Truncated(usize),
    #[error("checkpoint CRC mismatch: stored {stored:#018x}, computed {computed:#018x}")]
    CrcMismatch { stored: u64, computed: u64 },
    #[error("malformed checkpoint record: {0}")]
    Malformed(String),
}

pub fn encode_checkpoint(params: &ParamStore) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + params.scalar_count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    for (name, t) in params.iter() {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc64::checksum(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or(CheckpointError::Truncated(self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
    if bytes.len() < CHECKPOINT_MAGIC.len() {
        return if CHECKPOINT_MAGIC.starts_with(bytes) {
            Err(CheckpointError::Truncated(bytes.len()))
        } else {
            Err(CheckpointError::BadMagic)
        };
    }
    if &bytes[..7] != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    if bytes.len() < 7 + 8 {
        return Err(CheckpointError::Truncated(bytes.len()));
    }
    let body = &bytes[..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());

    // Parse before checking the CRC so a short file reports truncation rather
    // than a checksum failure.
    let mut cur = Cursor { buf: body, pos: 7 };
    let mut params = ParamStore::new();
    let mut parse_err = None;
    while cur.pos < body.len() {
        match parse_record(&mut cur) {
            Ok((name, t)) => {
                params.push(name, t);
            }
            Err(e) => {
                parse_err = Some(e);
                break;
            }
        }
    }
    let computed = crc64::checksum(body);
    match parse_err {
        Some(CheckpointError::Truncated(at)) if stored != computed => Err(CheckpointError::Truncated(at)),
        Some(e) if stored == computed => Err(e),
        _ if stored != computed => Err(CheckpointError::CrcMismatch { stored, computed }),
        Some(e) => Err(e),
        None => Ok(params),
    }
}

fn parse_record(cur: &mut Cursor<'_>) -> Result<(String, Tensor), CheckpointError> {
    let name_len = cur.u32()? as usize;
    let name = std::str::from_utf8(cur.take(name_len)?)
        .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?
        .to_string();
    let rank = cur.u32()? as usize;
    if rank > 8 {
        return Err(CheckpointError::Malformed(format!("`{name}` has rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(cur.u64()? as usize);
    }
    let numel = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
    let numel = numel.filter(|&n| n > 0).ok_or_else(|| CheckpointError::Malformed(format!("`{name}` shape {shape:?}")))?;
    let raw = cur.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated(cur.pos))?)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let t = Tensor::new(&shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok((name, t))
}

pub fn write_checkpoint(params: &ParamStore, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(params))?;
    Ok(())
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}
