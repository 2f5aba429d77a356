use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{apply_transform, enumerate_transforms, transformed_dims, TRANSFORM_COUNT};
use super::condition::{make_condition, ConditionKind, DEFAULT_PEAK};
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::volume::{load_volume, pad_to_grid, partition, save_volume, BlockGrid, Volume, VoxelBlock, DEFAULT_EDGE, DEFAULT_PAD};

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Position of a pair within the augmented set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PairKey {
    pub volume: usize,
    pub transform: usize,
    pub block: usize,
}

impl PairKey {
    pub fn stem(&self) -> String {
        format!("vol{}_t{}_b{}", self.volume, self.transform, self.block)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub key: PairKey,
    pub condition: VoxelBlock,
    pub target: VoxelBlock,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingSetOptions {
    pub kind: ConditionKind,
    pub seed: u64,
    pub edge: usize,
    pub peak: f64,
}

impl TrainingSetOptions {
    pub fn new(kind: ConditionKind, seed: u64) -> Self {
        TrainingSetOptions { kind, seed, edge: DEFAULT_EDGE, peak: DEFAULT_PEAK }
    }
}

/// Optional filter deciding which blocks enter the set.
pub type BlockSelector<'a> = &'a (dyn Fn(&PairKey) -> bool + Sync);

/// Keys of every pair the set would contain, in emission order.
pub fn plan_training_set(dims: &[[usize; 3]], edge: usize, selector: Option<BlockSelector>) -> Result<Vec<PairKey>> {
    if dims.is_empty() {
        return Err(Error::EmptyInput("training set needs at least one volume".into()));
    }
    let transforms = enumerate_transforms();
    let mut keys = Vec::new();
    for (volume, &d) in dims.iter().enumerate() {
        let padded = BlockGrid::new(d, edge, DEFAULT_PAD)?.padded_dims;
        for t in &transforms {
            let grid = BlockGrid::new(transformed_dims(padded, t), edge, DEFAULT_PAD)?;
            for block in 0..grid.total_blocks() {
                let key = PairKey { volume, transform: t.index, block };
                if selector.is_none_or(|s| s(&key)) {
                    keys.push(key);
                }
            }
        }
    }
    Ok(keys)
}

pub fn build_training_set(volumes: &[Volume], kind: ConditionKind, seed: u64) -> Result<Vec<TrainingPair>> {
    build_training_set_with(volumes, &TrainingSetOptions::new(kind, seed), None)
}

/// Pads each volume to its block grid, applies all transforms, partitions,
/// and degrades every selected block. Per-pair noise seeds depend only on
/// `(seed, volume, transform, block)`.
pub fn build_training_set_with(
    volumes: &[Volume],
    opts: &TrainingSetOptions,
    selector: Option<BlockSelector>,
) -> Result<Vec<TrainingPair>> {
    let dims: Vec<[usize; 3]> = volumes.iter().map(Volume::dims).collect();
    let keys = plan_training_set(&dims, opts.edge, selector)?;
    let transforms = enumerate_transforms();
    let mut pairs = Vec::with_capacity(keys.len());
    // Group keys by (volume, transform) so each transformed volume is built once.
    let mut start = 0;
    while start < keys.len() {
        let (v, t) = (keys[start].volume, keys[start].transform);
        let end = start + keys[start..].iter().take_while(|k| k.volume == v && k.transform == t).count();
        let grid = BlockGrid::new(volumes[v].dims(), opts.edge, DEFAULT_PAD)?;
        let moved = apply_transform(&pad_to_grid(&volumes[v], &grid), &transforms[t]);
        let (_, blocks) = partition(&moved, opts.edge, DEFAULT_PAD)?;
        let group: Result<Vec<TrainingPair>> = keys[start..end]
            .par_iter()
            .map(|key| {
                let target = blocks[key.block].clone();
                let seed = derive_seed(opts.seed, &[key.volume as u64, key.transform as u64, key.block as u64]);
                let condition = make_condition(&target, opts.kind, seed, opts.peak)?;
                Ok(TrainingPair { key: *key, condition, target })
            })
            .collect();
        pairs.extend(group?);
        start = end;
    }
    debug_assert!(pairs.iter().all(|p| p.key.transform < TRANSFORM_COUNT));
    Ok(pairs)
}

/// Writes `vol{V}_t{T}_b{B}_{cond|target}.ctv` files and a manifest.
pub fn save_training_set(dir: impl AsRef<Path>, pairs: &[TrainingPair], opts: &TrainingSetOptions) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    manifest.push_str(&format!("# seed {}\n# kind {}\n# edge {}\n# peak {}\n", opts.seed, opts.kind, opts.edge, opts.peak));
    for p in pairs {
        let stem = p.key.stem();
        let cond = format!("{stem}_cond.ctv");
        let target = format!("{stem}_target.ctv");
        save_volume(&p.condition.to_volume(), dir.join(&cond))?;
        save_volume(&p.target.to_volume(), dir.join(&target))?;
        manifest.push_str(&format!("{cond} {target}\n"));
    }
    fs::File::create(dir.join(MANIFEST_NAME))?.write_all(manifest.as_bytes())?;
    Ok(())
}

fn parse_stem(name: &str) -> Option<PairKey> {
    let stem = name.strip_suffix("_cond.ctv")?;
    let mut parts = stem.split('_');
    let volume = parts.next()?.strip_prefix("vol")?.parse().ok()?;
    let transform = parts.next()?.strip_prefix('t')?.parse().ok()?;
    let block = parts.next()?.strip_prefix('b')?.parse().ok()?;
    parts.next().is_none().then_some(PairKey { volume, transform, block })
}

/// Reads a directory written by [`save_training_set`].
pub fn load_training_set(dir: impl AsRef<Path>) -> Result<(TrainingSetOptions, Vec<TrainingPair>)> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&manifest_path)?;
    let bad = |msg: String| Error::Format { path: manifest_path.display().to_string(), msg };
    let mut opts = TrainingSetOptions::new(ConditionKind::Autoencoder, 0);
    let mut pairs = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(header) = line.strip_prefix('#') {
            let mut kv = header.split_whitespace();
            let (key, value) = (kv.next().unwrap_or(""), kv.next().unwrap_or(""));
            let parsed = match key {
                "seed" => value.parse().map(|v| opts.seed = v).is_ok(),
                "kind" => value.parse().map(|v| opts.kind = v).is_ok(),
                "edge" => value.parse().map(|v| opts.edge = v).is_ok(),
                "peak" => value.parse().map(|v| opts.peak = v).is_ok(),
                _ => true,
            };
            if !parsed {
                return Err(bad(format!("line {}: bad header value '{value}'", lineno + 1)));
            }
            continue;
        }
        let mut cols = line.split_whitespace();
        let (Some(cond), Some(target), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(bad(format!("line {}: expected '<cond> <target>'", lineno + 1)));
        };
        let key = parse_stem(cond).ok_or_else(|| bad(format!("line {}: bad pair name '{cond}'", lineno + 1)))?;
        let block = |name: &str| -> Result<VoxelBlock> { VoxelBlock::from_volume(&load_volume(dir.join(name))?, [0; 3]) };
        pairs.push(TrainingPair { key, condition: block(cond)?, target: block(target)? });
    }
    if pairs.is_empty() {
        return Err(Error::EmptyInput(format!("no pairs listed in {}", manifest_path.display())));
    }
    Ok((opts, pairs))
}
