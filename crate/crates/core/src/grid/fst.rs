//! `FST1` field-stack files.
//!
//! Layout: magic `FST1`; little-endian u32 `c, t, ny, nx, name_len`; a UTF-8
//! JSON name table of `name_len` bytes; then `c*t*ny*nx` little-endian f32
//! values in `[c, t, y, x]` order. Land masks are 1-channel stacks holding 0/1.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use super::{FieldStack, Grid, LandMask};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FST1";
const MASK_CHANNEL: &str = "land_mask";

#[derive(Serialize, Deserialize)]
struct NameTable {
    channels: Vec<String>,
    dt: f64,
    t0: f64,
    dx: f64,
    dy: f64,
    periodic_x: bool,
    periodic_y: bool,
}

pub fn encode_fst(fs: &FieldStack) -> Result<Vec<u8>> {
    let grid = fs.grid();
    let table = NameTable {
        channels: fs.channels().to_vec(),
        dt: fs.dt(),
        t0: fs.t0(),
        dx: grid.dx,
        dy: grid.dy,
        periodic_x: grid.periodic_x,
        periodic_y: grid.periodic_y,
    };
    let names = serde_json::to_vec(&table)?;
    let dims = [
        fs.n_channels(),
        fs.n_times(),
        grid.ny,
        grid.nx,
        names.len(),
    ];
    let mut out = Vec::with_capacity(24 + names.len() + 4 * fs.as_slice().len());
    out.extend_from_slice(MAGIC);
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::format("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&names);
    for &v in fs.as_slice() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_fst(bytes: &[u8]) -> Result<FieldStack> {
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(Error::format("missing FST1 magic"));
    }
    let word = |i: usize| {
        let start = 4 + 4 * i;
        u32::from_le_bytes(bytes[start..start + 4].try_into().unwrap()) as usize
    };
    let (c, t, ny, nx, name_len) = (word(0), word(1), word(2), word(3), word(4));
    let body = &bytes[24..];
    if body.len() < name_len {
        return Err(Error::format("truncated name table"));
    }
    let table: NameTable = serde_json::from_slice(&body[..name_len])
        .map_err(|e| Error::format(format!("bad name table: {e}")))?;
    let n = c
        .checked_mul(t)
        .and_then(|v| v.checked_mul(ny))
        .and_then(|v| v.checked_mul(nx))
        .ok_or_else(|| Error::format("dimension overflow"))?;
    let payload = &body[name_len..];
    if payload.len() != 4 * n {
        return Err(Error::format(format!(
            "expected {} payload bytes, found {}",
            4 * n,
            payload.len()
        )));
    }
    let values: Vec<f64> = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let data = Array4::from_shape_vec((c, t, ny, nx), values)
        .map_err(|e| Error::format(e.to_string()))?;
    let grid = Grid::new(nx, ny, table.dx, table.dy, table.periodic_x, table.periodic_y)?;
    FieldStack::new(data, table.channels, table.dt, table.t0, grid)
}

pub fn write_fst(path: impl AsRef<Path>, fs: &FieldStack) -> Result<()> {
    fs::write(path, encode_fst(fs)?)?;
    Ok(())
}

pub fn read_fst(path: impl AsRef<Path>) -> Result<FieldStack> {
    decode_fst(&fs::read(path)?)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &LandMask, grid: &Grid) -> Result<()> {
    mask.check_grid(grid)?;
    let data = mask
        .view()
        .mapv(|land| if land { 1.0 } else { 0.0 })
        .into_shape_with_order((1, 1, grid.ny, grid.nx))
        .map_err(|e| Error::invalid(e.to_string()))?;
    let fs = FieldStack::new(data, vec![MASK_CHANNEL.into()], 1.0, 0.0, *grid)?;
    write_fst(path, &fs)
}

pub fn read_mask(path: impl AsRef<Path>) -> Result<(LandMask, Grid)> {
    let fs = read_fst(path)?;
    if fs.n_channels() != 1 || fs.n_times() != 1 {
        return Err(Error::format("mask file must hold one channel and one slice"));
    }
    let plane = fs.slice2(0, 0);
    let mask = Array2::from_shape_fn(plane.dim(), |ix| plane[ix] != 0.0);
    Ok((LandMask::new(mask)?, *fs.grid()))
}
