//! Dense 3D grids in (z, y, x) order.

use serde::{Deserialize, Serialize};

/// Voxel counts along (z, y, x).
pub type Shape3 = [usize; 3];

/// Millimetres per voxel along (z, y, x).
pub type Spacing3 = [f64; 3];

/// A scalar volume stored z-major, then y, then x.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    shape: Shape3,
    data: Vec<f32>,
}

impl Grid3 {
    pub fn zeros(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    /// Wraps a raw buffer. Returns `None` when the length does not match the shape.
    pub fn from_vec(shape: Shape3, data: Vec<f32>) -> Option<Self> {
        (data.len() == shape.iter().product::<usize>()).then_some(Self { shape, data })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: f32) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    /// Axial slice `z` as a row-major (y, x) buffer.
    pub fn slice(&self, z: usize) -> &[f32] {
        let n = self.shape[1] * self.shape[2];
        &self.data[z * n..(z + 1) * n]
    }
}

/// A boolean volume with the same layout as [`Grid3`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask3 {
    shape: Shape3,
    data: Vec<bool>,
}

impl Mask3 {
    pub fn empty(shape: Shape3) -> Self {
        Self {
            shape,
            data: vec![false; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: Shape3, data: Vec<bool>) -> Option<Self> {
        (data.len() == shape.iter().product::<usize>()).then_some(Self { shape, data })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.shape[1] + y) * self.shape[2] + x
    }

    #[inline]
    pub fn get(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.index(z, y, x)]
    }

    #[inline]
    pub fn set(&mut self, z: usize, y: usize, x: usize, v: bool) {
        let i = self.index(z, y, x);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn slice(&self, z: usize) -> &[bool] {
        let n = self.shape[1] * self.shape[2];
        &self.data[z * n..(z + 1) * n]
    }

    /// True when any voxel of axial slice `z` is set.
    pub fn slice_any(&self, z: usize) -> bool {
        self.slice(z).iter().any(|&b| b)
    }

    pub fn to_grid(&self) -> Grid3 {
        Grid3 {
            shape: self.shape,
            data: self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Thresholds a grid at 0.5.
    pub fn from_grid(grid: &Grid3) -> Self {
        Self {
            shape: grid.shape(),
            data: grid.data().iter().map(|&v| v > 0.5).collect(),
        }
    }

    /// One step of 26-neighbourhood dilation.
    pub fn dilate26(&self) -> Self {
        let [nz, ny, nx] = self.shape;
        let mut out = self.clone();
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !self.get(z, y, x) {
                        continue;
                    }
                    for (dz, dy, dx) in NEIGHBORS_26 {
                        if let Some((qz, qy, qx)) = offset(self.shape, (z, y, x), (dz, dy, dx)) {
                            out.set(qz, qy, qx, true);
                        }
                    }
                }
            }
        }
        out
    }
}

/// The 26 non-zero offsets of the 3×3×3 neighbourhood.
pub const NEIGHBORS_26: [(isize, isize, isize); 26] = {
    let mut out = [(0isize, 0isize, 0isize); 26];
    let mut i = 0;
    let mut dz = -1isize;
    while dz <= 1 {
        let mut dy = -1isize;
        while dy <= 1 {
            let mut dx = -1isize;
            while dx <= 1 {
                if !(dz == 0 && dy == 0 && dx == 0) {
                    out[i] = (dz, dy, dx);
                    i += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

#[inline]
pub(crate) fn offset(
    shape: Shape3,
    (z, y, x): (usize, usize, usize),
    (dz, dy, dx): (isize, isize, isize),
) -> Option<(usize, usize, usize)> {
    let qz = z as isize + dz;
    let qy = y as isize + dy;
    let qx = x as isize + dx;
    if qz < 0 || qy < 0 || qx < 0 {
        return None;
    }
    let (qz, qy, qx) = (qz as usize, qy as usize, qx as usize);
    (qz < shape[0] && qy < shape[1] && qx < shape[2]).then_some((qz, qy, qx))
}
