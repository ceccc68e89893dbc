//! Flat tensor blocks.
//!
//! Layout (little-endian):
//! - magic: `FVGE`
//! - version: u32 (1 = 4-byte elements, 2 = 8-byte elements)
//! - rows: u32
//! - cols: u32
//! - data: rows * cols elements, row-major

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"FVGE";
pub const HEADER_LEN: usize = 16;
/// Dataset blocks: f32 or raw u32 words.
pub const VERSION_F32: u32 = 1;
/// Checkpoint blocks: f64.
pub const VERSION_F64: u32 = 2;

fn element_size(version: u32) -> Option<usize> {
    match version {
        VERSION_F32 => Some(4),
        VERSION_F64 => Some(8),
        _ => None,
    }
}

fn header(version: u32, rows: usize, cols: usize) -> Result<[u8; HEADER_LEN]> {
    let r = u32::try_from(rows).map_err(|_| Error::Shape(format!("{rows} rows exceed u32")))?;
    let c = u32::try_from(cols).map_err(|_| Error::Shape(format!("{cols} cols exceed u32")))?;
    let mut h = [0u8; HEADER_LEN];
    h[..4].copy_from_slice(MAGIC);
    h[4..8].copy_from_slice(&version.to_le_bytes());
    h[8..12].copy_from_slice(&r.to_le_bytes());
    h[12..16].copy_from_slice(&c.to_le_bytes());
    Ok(h)
}

fn write_bytes(
    path: &Path,
    version: u32,
    rows: usize,
    cols: usize,
    payload: Vec<u8>,
) -> Result<()> {
    let mut bytes = header(version, rows, cols)?.to_vec();
    bytes.extend_from_slice(&payload);
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a block, checking magic, version and payload length.
fn read_bytes(path: &Path, version: u32) -> Result<(usize, usize, Vec<u8>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(
            path,
            format!("file is {} bytes, shorter than the header", bytes.len()),
        ));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(path, "bad magic"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let found = word(4);
    if found != version {
        return Err(Error::format(
            path,
            format!("version {found}, expected {version}"),
        ));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let size = element_size(version).expect("known version");
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(size))
        .ok_or_else(|| Error::format(path, "block size overflows"))?;
    let payload = bytes[HEADER_LEN..].to_vec();
    if payload.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "{rows}x{cols} block needs {expected} payload bytes, found {}",
                payload.len()
            ),
        ));
    }
    Ok((rows, cols, payload))
}

pub fn write_f32(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    write_u32(
        path,
        rows,
        cols,
        &data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
    )
}

pub fn read_f32(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let (r, c, words) = read_u32(path)?;
    Ok((r, c, words.into_iter().map(f32::from_bits).collect()))
}

/// Raw 32-bit words in a version-1 block; lets one file mix integer and
/// float columns.
pub fn write_u32(path: &Path, rows: usize, cols: usize, data: &[u32]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::shape(rows * cols, data.len(), "block data"));
    }
    let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path, VERSION_F32, rows, cols, payload)
}

pub fn read_u32(path: &Path) -> Result<(usize, usize, Vec<u32>)> {
    let (r, c, payload) = read_bytes(path, VERSION_F32)?;
    let data = payload
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    Ok((r, c, data))
}

pub fn write_f64(path: &Path, rows: usize, cols: usize, data: &[f64]) -> Result<()> {
    if data.len() != rows * cols {
        return Err(Error::shape(rows * cols, data.len(), "block data"));
    }
    let payload = data.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_bytes(path, VERSION_F64, rows, cols, payload)
}

pub fn read_f64(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let (r, c, payload) = read_bytes(path, VERSION_F64)?;
    let data = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    Ok((r, c, data))
}
