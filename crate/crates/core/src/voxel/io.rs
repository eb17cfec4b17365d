//! `VOXG` grid files.
//!
//! Layout, all little-endian:
//!
//! | bytes | content                                      |
//! |-------|----------------------------------------------|
//! | 4     | magic `VOXG`                                 |
//! | 1     | format version (1)                           |
//! | 48    | min corner x, y, z then max corner x, y, z (f64) |
//! | 12    | dims nx, ny, nz (u32)                        |
//! | n     | one label byte per voxel, row-major `[z, y, x]` |

use std::fs;
use std::path::Path;

use super::{GridGeometry, LabelSpace, VoxelGrid};
use crate::error::{Error, Result};

pub const GRID_MAGIC: &[u8; 4] = b"VOXG";
pub const GRID_VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 48 + 12;

pub fn encode_grid(grid: &VoxelGrid) -> Vec<u8> {
    let g = grid.geometry();
    let mut out = Vec::with_capacity(HEADER_LEN + grid.labels().len());
    out.extend_from_slice(GRID_MAGIC);
    out.push(GRID_VERSION);
    for v in g.min_corner().iter().chain(g.max_corner().iter()) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for d in g.dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(grid.labels());
    out
}

pub fn decode_grid(bytes: &[u8], space: &LabelSpace) -> Result<VoxelGrid> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::Format {
            offset: bytes.len(),
            message: format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
        });
    }
    if &bytes[..4] != GRID_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}", &bytes[..4]),
        });
    }
    if bytes[4] != GRID_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {}", bytes[4]),
        });
    }
    let f64_at = |i: usize| f64::from_le_bytes(bytes[5 + 8 * i..13 + 8 * i].try_into().unwrap());
    let u32_at = |i: usize| u32::from_le_bytes(bytes[53 + 4 * i..57 + 4 * i].try_into().unwrap());
    let min = [f64_at(0), f64_at(1), f64_at(2)];
    let max = [f64_at(3), f64_at(4), f64_at(5)];
    let dims = [u32_at(0) as usize, u32_at(1) as usize, u32_at(2) as usize];
    let geometry = GridGeometry::new(min, max, dims).map_err(|e| Error::Format {
        offset: 5,
        message: e.to_string(),
    })?;
    let expected = HEADER_LEN + geometry.num_voxels();
    if bytes.len() != expected {
        return Err(Error::Format {
            offset: bytes.len().min(expected),
            message: format!("expected {expected} bytes in total, found {}", bytes.len()),
        });
    }
    let labels = &bytes[HEADER_LEN..];
    if let Some(pos) = labels.iter().position(|&l| space.check(l).is_err()) {
        return Err(Error::Validation(format!(
            "label {} at byte {} exceeds {} classes",
            labels[pos],
            HEADER_LEN + pos,
            space.num_classes()
        )));
    }
    VoxelGrid::new(geometry, labels.to_vec())
}

pub fn write_grid(grid: &VoxelGrid, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_grid(grid)).map_err(|e| Error::io(path, e))
}

pub fn read_grid(path: impl AsRef<Path>, space: &LabelSpace) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_grid(&bytes, space)
}
