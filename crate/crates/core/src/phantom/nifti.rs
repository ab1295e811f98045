//! Minimal import of uncompressed single-file NIfTI-1 volumes.
//!
//! Only 3D scalar images are accepted. Voxel data is read as stored,
//! scaled by `scl_slope`/`scl_inter` when a slope is set, and reordered from
//! NIfTI's x-fastest layout into (z, y, x) grids. Orientation matrices are
//! ignored; volumes are assumed to be co-registered already.

use std::path::Path;

use byteorder::{BigEndian, ByteOrder, LittleEndian};

use super::PhantomError;
use crate::grid::{Grid3, Spacing3};

const HEADER_SIZE: usize = 348;

pub fn import_nifti(path: &Path) -> Result<(Grid3, Spacing3), PhantomError> {
    let bytes = std::fs::read(path).map_err(|e| PhantomError::io(path, e))?;
    parse_nifti(&bytes).map_err(|m| PhantomError::Corrupt(format!("{}: {m}", path.display())))
}

pub fn parse_nifti(bytes: &[u8]) -> Result<(Grid3, Spacing3), String> {
    if bytes.len() < HEADER_SIZE {
        return Err("file shorter than a NIfTI-1 header".into());
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_with::<LittleEndian>(bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        parse_with::<BigEndian>(bytes)
    } else {
        Err("sizeof_hdr is not 348".into())
    }
}

fn parse_with<E: ByteOrder>(b: &[u8]) -> Result<(Grid3, Spacing3), String> {
    if &b[344..347] != b"n+1" {
        return Err("only single-file NIfTI-1 (n+1) is supported".into());
    }
    let dim: Vec<i16> = (0..8).map(|i| E::read_i16(&b[40 + 2 * i..])).collect();
    let ndim = dim[0];
    if !(3..=4).contains(&ndim) || (ndim == 4 && dim[4] > 1) {
        return Err(format!("expected a 3D volume, got {ndim} dimensions"));
    }
    let (nx, ny, nz) = (dim[1], dim[2], dim[3]);
    if nx <= 0 || ny <= 0 || nz <= 0 {
        return Err("non-positive dimension".into());
    }
    let (nx, ny, nz) = (nx as usize, ny as usize, nz as usize);
    let datatype = E::read_i16(&b[70..]);
    let pixdim: Vec<f32> = (0..8).map(|i| E::read_f32(&b[76 + 4 * i..])).collect();
    let vox_offset = E::read_f32(&b[108..]) as usize;
    let slope = E::read_f32(&b[112..]);
    let inter = E::read_f32(&b[116..]);

    let width = match datatype {
        2 => 1,
        4 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(format!("unsupported datatype code {other}")),
    };
    let n = nx * ny * nz;
    let end = vox_offset + n * width;
    if b.len() < end {
        return Err("voxel data truncated".into());
    }
    let raw = &b[vox_offset..end];
    let read = |i: usize| -> f64 {
        let s = &raw[i * width..];
        match datatype {
            2 => s[0] as f64,
            4 => E::read_i16(s) as f64,
            8 => E::read_i32(s) as f64,
            16 => E::read_f32(s) as f64,
            _ => E::read_f64(s),
        }
    };
    let (slope, inter) = if slope != 0.0 && slope.is_finite() {
        (slope as f64, inter as f64)
    } else {
        (1.0, 0.0)
    };
    // NIfTI order is x fastest, then y, then z: identical to (z, y, x) row-major.
    let data: Vec<f32> = (0..n).map(|i| (read(i) * slope + inter) as f32).collect();
    let spacing = [pixdim[3].abs() as f64, pixdim[2].abs() as f64, pixdim[1].abs() as f64];
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err("pixdim spacing must be positive".into());
    }
    Ok((Grid3::from_vec([nz, ny, nx], data).expect("sized above"), spacing))
}
