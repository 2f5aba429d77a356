//! Volume data model, CTV1 I/O, invertible preprocessing and block tiling.

mod blocks;
mod io;
mod preprocess;

pub use blocks::{pad_to_grid, partition, stitch, BlockGrid, VoxelBlock, DEFAULT_EDGE, DEFAULT_PAD};
pub use io::{load_meta, load_volume, meta_path, save_meta, save_volume, VolumeMeta, CTV_MAGIC};
pub use preprocess::{
    apply_equalization, apply_normalization, denormalize, denormalize_and_unequalize, equalize, normalize, preprocess, unequalize, Bounds,
    PreprocessParams, DEFAULT_BINS,
};

use crate::error::{Error, Result};

/// Dense scalar field, x-fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: [usize; 3],
    /// Millimetres per voxel. Carried along but never used in computation.
    pub spacing: [f64; 3],
    data: Vec<f64>,
}

impl Volume {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::DimensionOverflow(dims.map(|d| d as u64)));
        }
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(Error::LengthMismatch { len: data.len(), dims });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteVoxel(i));
        }
        Ok(Volume { dims, spacing: [1.0; 3], data })
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Self {
        assert!(value.is_finite());
        Volume { dims, spacing: [1.0; 3], data: vec![value; dims[0] * dims[1] * dims[2]] }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for z in 0..dims[2] {
            for y in 0..dims[1] {
                for x in 0..dims[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Volume::new(dims, data)
    }

    pub fn with_spacing(mut self, spacing: [f64; 3]) -> Self {
        self.spacing = spacing;
        self
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    /// Applies `f` voxelwise. Panics if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Volume {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        assert!(data.iter().all(|v| v.is_finite()), "map produced a non-finite voxel");
        Volume { dims: self.dims, spacing: self.spacing, data }
    }

    /// Axial slice `z` as a row-major `nx * ny` buffer.
    pub fn axial_slice(&self, z: usize) -> &[f64] {
        let n = self.dims[0] * self.dims[1];
        &self.data[z * n..(z + 1) * n]
    }
}
