use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::model::Generator;
use super::train::{batch_tensor, noise_tensor};
use crate::autodiff::{Scalar, Tensor};
use crate::degrade::{make_condition, ConditionKind};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::volume::{
    apply_equalization, apply_normalization, denormalize_and_unequalize, partition, stitch, Bounds, PreprocessParams, Volume, VoxelBlock,
    DEFAULT_PAD,
};

/// Blocks generated per forward pass during inference.
const INFER_BATCH: usize = 4;

/// Anything that maps condition blocks to generated blocks.
pub trait BlockGenerator: Sync {
    fn edge(&self) -> usize;

    /// One output per condition; `seeds[i]` drives the noise of block `i`.
    /// Output origins copy the conditions'.
    fn generate(&self, conds: &[VoxelBlock], seeds: &[u64]) -> Result<Vec<VoxelBlock>>;
}

impl<T: Scalar> BlockGenerator for Generator<T> {
    fn edge(&self) -> usize {
        self.config().edge
    }

    fn generate(&self, conds: &[VoxelBlock], seeds: &[u64]) -> Result<Vec<VoxelBlock>> {
        if conds.len() != seeds.len() {
            return Err(Error::InvalidArgument(format!("{} conditions but {} seeds", conds.len(), seeds.len())));
        }
        let e = self.edge();
        let mut out = Vec::with_capacity(conds.len());
        for (cs, ss) in conds.chunks(INFER_BATCH).zip(seeds.chunks(INFER_BATCH)) {
            let cond: Tensor<T> = batch_tensor(cs, e)?;
            let noise = self.config().noise.then(|| {
                let parts: Vec<T> =
                    ss.iter().flat_map(|&s| noise_tensor::<T>(&mut ChaCha8Rng::seed_from_u64(s), 1, e).into_data()).collect();
                Tensor::new(cond.shape().to_vec(), parts).expect("noise matches condition batch")
            });
            let y = self.run(&cond, noise.as_ref())?;
            let n = e * e * e;
            for (i, c) in cs.iter().enumerate() {
                let data = y.data()[i * n..(i + 1) * n].iter().map(|v| v.f64()).collect();
                out.push(VoxelBlock { edge: e, origin: c.origin, data });
            }
        }
        Ok(out)
    }
}

/// Generates one block; deterministic in `seed`.
pub fn infer_block(gen: &dyn BlockGenerator, cond: &VoxelBlock, seed: u64) -> Result<VoxelBlock> {
    if cond.edge != gen.edge() {
        return Err(Error::ShapeMismatch(format!("condition edge {} but generator edge {}", cond.edge, gen.edge())));
    }
    Ok(gen.generate(std::slice::from_ref(cond), &[seed])?.remove(0))
}

/// Full-volume pipeline: preprocess with the given parameters, partition,
/// degrade each block into a condition, generate, stitch and map back to the
/// raw intensity scale.
pub fn infer_volume(
    gen: &dyn BlockGenerator,
    v: &Volume,
    params: &PreprocessParams,
    bounds: Bounds,
    kind: ConditionKind,
    seed: u64,
    peak: f64,
) -> Result<Volume> {
    let normalized = apply_normalization(&apply_equalization(v, params), bounds);
    let (grid, blocks) = partition(&normalized, gen.edge(), DEFAULT_PAD)?;
    let conds = blocks
        .par_iter()
        .enumerate()
        .map(|(i, b)| make_condition(b, kind, derive_seed(seed, &[1, i as u64]), peak))
        .collect::<Result<Vec<_>>>()?;
    let seeds: Vec<u64> = (0..blocks.len()).map(|i| derive_seed(seed, &[2, i as u64])).collect();
    let generated = gen.generate(&conds, &seeds)?;
    let stitched = stitch(&grid, &generated)?;
    Ok(denormalize_and_unequalize(&stitched, params, bounds)?.with_spacing(v.spacing))
}
