//! `GPFG` binary grid container.
//!
//! ```text
//! magic "GPFG" | version u16 | H u16 | W u16 | D u32 | flags u32
//! mask: H*W bytes (0/1) | data: H*W*D f32, row-major, channel-last
//! ```
//! All integers and floats little-endian. Flag bit 0 marks a variant grid.

use std::io::{Read, Write};

use super::{dot, format_error, FeatureGrid, NORM_TOLERANCE};
use crate::binio::{put_f32s, put_u16, put_u32, ByteReader};
use crate::error::Result;

pub const GRID_MAGIC: &[u8; 4] = b"GPFG";
pub const GRID_VERSION: u16 = 1;
const FLAG_VARIANT: u32 = 1;
const HEADER_LEN: u64 = 18;

pub fn write_grid(w: &mut impl Write, grid: &FeatureGrid) -> Result<()> {
    w.write_all(GRID_MAGIC)?;
    put_u16(w, GRID_VERSION)?;
    put_u16(w, grid.height() as u16)?;
    put_u16(w, grid.width() as u16)?;
    put_u32(w, grid.dim() as u32)?;
    put_u32(w, if grid.is_variant() { FLAG_VARIANT } else { 0 })?;
    let mask: Vec<u8> = grid.mask().iter().map(|&m| m as u8).collect();
    w.write_all(&mask)?;
    put_f32s(w, grid.data())?;
    Ok(())
}

pub fn encode_grid(grid: &FeatureGrid) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN as usize + grid.mask().len() + grid.data().len() * 4);
    write_grid(&mut out, grid).expect("writing to a Vec cannot fail");
    out
}

pub fn read_grid(r: impl Read) -> Result<FeatureGrid> {
    read_grid_at(&mut ByteReader::new(r), 0)
}

/// Decodes one grid from the front of `bytes`; `base` is added to reported
/// offsets so errors point into an enclosing container.
pub fn decode_grid(bytes: &[u8], base: u64) -> Result<FeatureGrid> {
    let mut reader = ByteReader::new(bytes);
    let grid = read_grid_at(&mut reader, base)?;
    if reader.offset() as usize != bytes.len() {
        return Err(format_error(
            base + reader.offset(),
            format!("{} trailing bytes after grid", bytes.len() as u64 - reader.offset()),
        ));
    }
    Ok(grid)
}

fn read_grid_at<R: Read>(r: &mut ByteReader<R>, base: u64) -> Result<FeatureGrid> {
    let rebase = |e| rebase_error(e, base);
    r.expect_magic(GRID_MAGIC).map_err(rebase)?;
    let version = r.u16().map_err(rebase)?;
    if version != GRID_VERSION {
        return Err(format_error(base + 4, format!("unsupported GPFG version {version}")));
    }
    let height = r.u16().map_err(rebase)? as usize;
    let width = r.u16().map_err(rebase)? as usize;
    let dim = r.u32().map_err(rebase)? as usize;
    if height == 0 || width == 0 || dim == 0 {
        return Err(format_error(base + 6, format!("zero dimension {height}x{width}x{dim}")));
    }
    let flags = r.u32().map_err(rebase)?;
    if flags & !FLAG_VARIANT != 0 {
        return Err(format_error(base + 14, format!("unknown flag bits {flags:#x}")));
    }
    let mask_start = r.offset();
    let mask_bytes = r.bytes(height * width).map_err(rebase)?;
    let mut mask = Vec::with_capacity(mask_bytes.len());
    for (i, &b) in mask_bytes.iter().enumerate() {
        match b {
            0 => mask.push(false),
            1 => mask.push(true),
            _ => return Err(format_error(base + mask_start + i as u64, format!("mask byte {b} is not 0/1"))),
        }
    }
    let data_start = r.offset();
    let data = r.f32_vec(height * width * dim).map_err(rebase)?;
    for (cell, chunk) in data.chunks_exact(dim).enumerate() {
        let at = base + data_start + (cell * dim * 4) as u64;
        if mask[cell] {
            let norm = dot(chunk, chunk).sqrt();
            if !((norm - 1.0).abs() <= NORM_TOLERANCE) {
                return Err(format_error(at, format!("masked cell {cell} has norm {norm}")));
            }
        } else if chunk.iter().any(|&v| v != 0.0) {
            return Err(format_error(at, format!("unmasked cell {cell} is not zero")));
        }
    }
    Ok(FeatureGrid::from_parts(height, width, dim, data, mask)?.with_variant(flags & FLAG_VARIANT != 0))
}

fn rebase_error(e: crate::error::Error, base: u64) -> crate::error::Error {
    use crate::error::Error;
    match e {
        Error::Format { offset, message } => Error::Format {
            offset: offset + base,
            message,
        },
        Error::Truncated { offset, expected } => Error::Truncated {
            offset: offset + base,
            expected,
        },
        other => other,
    }
}
