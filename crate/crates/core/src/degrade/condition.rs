use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::VoxelBlock;

/// Photon count at normalized intensity +1.
pub const DEFAULT_PEAK: f64 = 1024.0;

/// What the generator is conditioned on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConditionKind {
    Autoencoder,
    Noisy,
    Pixelated,
}

impl ConditionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConditionKind::Autoencoder => "autoencoder",
            ConditionKind::Noisy => "noisy",
            ConditionKind::Pixelated => "pixelated",
        }
    }
}

impl fmt::Display for ConditionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "auto" | "autoencoder" | "identity" => Ok(ConditionKind::Autoencoder),
            "noisy" | "noise" => Ok(ConditionKind::Noisy),
            "pixelated" | "pixel" | "pixelate" => Ok(ConditionKind::Pixelated),
            other => Err(Error::InvalidArgument(format!("unknown condition '{other}' (expected autoencoder, noisy or pixelated)"))),
        }
    }
}

/// Degrades a normalized block into the generator's condition input.
pub fn make_condition(x: &VoxelBlock, kind: ConditionKind, seed: u64, peak: f64) -> Result<VoxelBlock> {
    if !(peak >= 1.0) || !peak.is_finite() {
        return Err(Error::InvalidParams(format!("peak must be a finite count >= 1, got {peak}")));
    }
    match kind {
        ConditionKind::Autoencoder => Ok(x.clone()),
        ConditionKind::Noisy => Ok(poisson_noise(x, seed, peak)),
        ConditionKind::Pixelated => pixelate(x),
    }
}

fn poisson_noise(x: &VoxelBlock, seed: u64, peak: f64) -> VoxelBlock {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = x
        .data
        .iter()
        .map(|&v| {
            let lambda = peak * (v.clamp(-1.0, 1.0) + 1.0) / 2.0;
            let k = if lambda > 0.0 { Poisson::new(lambda).expect("positive finite rate").sample(&mut rng) } else { 0.0 };
            (2.0 * k / peak - 1.0).clamp(-1.0, 1.0)
        })
        .collect();
    VoxelBlock { edge: x.edge, origin: x.origin, data }
}

/// Nearest-neighbour downsample by 2, then nearest-neighbour upsample back
/// to the original edge.
pub fn pixelate(x: &VoxelBlock) -> Result<VoxelBlock> {
    let e = x.edge;
    if !e.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("pixelation needs an even block edge, got {e}")));
    }
    let mut data = Vec::with_capacity(x.data.len());
    for k in 0..e {
        for j in 0..e {
            for i in 0..e {
                data.push(x.get(i & !1, j & !1, k & !1));
            }
        }
    }
    Ok(VoxelBlock { edge: e, origin: x.origin, data })
}
