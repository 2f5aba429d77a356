use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

pub const DEFAULT_EDGE: usize = 32;
/// Padding value; -1 is air after normalization.
pub const DEFAULT_PAD: f64 = -1.0;

/// Cubic tile cut from a (padded) volume.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBlock {
    pub edge: usize,
    pub origin: [usize; 3],
    pub data: Vec<f64>,
}

impl VoxelBlock {
    pub fn new(edge: usize, origin: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != edge * edge * edge {
            return Err(Error::ShapeMismatch(format!("block of edge {edge} needs {} voxels, got {}", edge * edge * edge, data.len())));
        }
        Ok(VoxelBlock { edge, origin, data })
    }

    pub fn filled(edge: usize, value: f64) -> Self {
        VoxelBlock { edge, origin: [0; 3], data: vec![value; edge * edge * edge] }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.edge + y) * self.edge + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.index(x, y, z)]
    }

    pub fn to_volume(&self) -> Volume {
        Volume::new([self.edge; 3], self.data.clone()).expect("block holds finite voxels")
    }

    pub fn from_volume(v: &Volume, origin: [usize; 3]) -> Result<Self> {
        let [nx, ny, nz] = v.dims();
        if nx != ny || ny != nz {
            return Err(Error::ShapeMismatch(format!("block volume must be cubic, got {:?}", v.dims())));
        }
        VoxelBlock::new(nx, origin, v.data().to_vec())
    }
}

/// Layout of a block tiling, sufficient to undo padding on stitch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub parent_dims: [usize; 3],
    pub padded_dims: [usize; 3],
    pub edge: usize,
    pub pad_value: f64,
    pub block_count: [usize; 3],
}

impl BlockGrid {
    pub fn new(parent_dims: [usize; 3], edge: usize, pad_value: f64) -> Result<Self> {
        if edge < 2 {
            return Err(Error::InvalidArgument(format!("block edge must be >= 2, got {edge}")));
        }
        let block_count = parent_dims.map(|d| d.div_ceil(edge));
        Ok(BlockGrid { parent_dims, padded_dims: block_count.map(|b| b * edge), edge, pad_value, block_count })
    }

    pub fn total_blocks(&self) -> usize {
        self.block_count.iter().product()
    }

    /// Origin of block `i` in z-major (then y, then x) order.
    pub fn origin(&self, i: usize) -> [usize; 3] {
        let [bx, by, _] = self.block_count;
        let x = i % bx;
        let y = (i / bx) % by;
        let z = i / (bx * by);
        [x * self.edge, y * self.edge, z * self.edge]
    }

    fn block_index(&self, origin: [usize; 3]) -> Option<usize> {
        let e = self.edge;
        if origin.iter().zip(self.padded_dims).any(|(&o, p)| o % e != 0 || o >= p) {
            return None;
        }
        let [bx, by, _] = self.block_count;
        Some((origin[2] / e * by + origin[1] / e) * bx + origin[0] / e)
    }
}

/// Copies `v` into the padded extent of `grid`, filling with `grid.pad_value`.
pub fn pad_to_grid(v: &Volume, grid: &BlockGrid) -> Volume {
    let [px, py, pz] = grid.padded_dims;
    let [nx, ny, nz] = v.dims();
    if [px, py, pz] == [nx, ny, nz] {
        return v.clone();
    }
    let mut data = vec![grid.pad_value; px * py * pz];
    for z in 0..nz.min(pz) {
        for y in 0..ny.min(py) {
            let src = v.index(0, y, z);
            let dst = (z * py + y) * px;
            let n = nx.min(px);
            data[dst..dst + n].copy_from_slice(&v.data()[src..src + n]);
        }
    }
    Volume::new([px, py, pz], data).expect("padding preserves finiteness").with_spacing(v.spacing)
}

/// Cuts `v` into non-overlapping `edge`-cubes, padding the far faces with
/// `pad_value` where the dims are not multiples of `edge`.
pub fn partition(v: &Volume, edge: usize, pad_value: f64) -> Result<(BlockGrid, Vec<VoxelBlock>)> {
    let grid = BlockGrid::new(v.dims(), edge, pad_value)?;
    let padded = pad_to_grid(v, &grid);
    let [px, py, _] = grid.padded_dims;
    let blocks = (0..grid.total_blocks())
        .map(|i| {
            let [ox, oy, oz] = grid.origin(i);
            let mut data = Vec::with_capacity(edge * edge * edge);
            for z in oz..oz + edge {
                for y in oy..oy + edge {
                    let row = (z * py + y) * px + ox;
                    data.extend_from_slice(&padded.data()[row..row + edge]);
                }
            }
            VoxelBlock { edge, origin: [ox, oy, oz], data }
        })
        .collect();
    Ok((grid, blocks))
}

/// Reassembles blocks produced by [`partition`] (in any order) and trims the
/// padding back to `grid.parent_dims`.
pub fn stitch(grid: &BlockGrid, blocks: &[VoxelBlock]) -> Result<Volume> {
    if blocks.len() != grid.total_blocks() {
        return Err(Error::GridMismatch(format!("expected {} blocks, got {}", grid.total_blocks(), blocks.len())));
    }
    let e = grid.edge;
    let mut seen = HashSet::with_capacity(blocks.len());
    for b in blocks {
        if b.edge != e || b.data.len() != e * e * e {
            return Err(Error::GridMismatch(format!("block at {:?} has edge {}, grid edge is {e}", b.origin, b.edge)));
        }
        let idx = grid.block_index(b.origin).ok_or_else(|| Error::GridMismatch(format!("origin {:?} is not on the grid", b.origin)))?;
        if !seen.insert(idx) {
            return Err(Error::GridMismatch(format!("duplicate block at {:?}", b.origin)));
        }
    }

    let [nx, ny, nz] = grid.parent_dims;
    let mut data = vec![0.0; nx * ny * nz];
    for b in blocks {
        let [ox, oy, oz] = b.origin;
        if ox >= nx || oy >= ny || oz >= nz {
            continue;
        }
        let wx = e.min(nx - ox);
        for z in 0..e.min(nz - oz) {
            for y in 0..e.min(ny - oy) {
                let src = (z * e + y) * e;
                let dst = ((oz + z) * ny + oy + y) * nx + ox;
                data[dst..dst + wx].copy_from_slice(&b.data[src..src + wx]);
            }
        }
    }
    Volume::new(grid.parent_dims, data)
}
