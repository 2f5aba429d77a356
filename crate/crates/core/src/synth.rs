//! Procedural CT-like phantoms: an air background, a soft-tissue body with
//! organ ellipsoids, low-density lung cavities and thin bone shells, all
//! carrying smooth value-noise texture.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::volume::Volume;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tissue {
    Air,
    Lung,
    Soft,
    Bone,
}

impl Tissue {
    pub const ALL: [Tissue; 4] = [Tissue::Air, Tissue::Lung, Tissue::Soft, Tissue::Bone];
}

/// Synthetic-HU interval `center +- half_width`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub center: f64,
    pub half_width: f64,
}

impl Band {
    pub fn lo(&self) -> f64 {
        self.center - self.half_width
    }

    pub fn hi(&self) -> f64 {
        self.center + self.half_width
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo() && v <= self.hi()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TissueBands {
    pub air: Band,
    pub lung: Band,
    pub soft: Band,
    pub bone: Band,
}

impl Default for TissueBands {
    fn default() -> Self {
        TissueBands {
            air: Band { center: -1000.0, half_width: 20.0 },
            lung: Band { center: -700.0, half_width: 100.0 },
            soft: Band { center: 40.0, half_width: 60.0 },
            bone: Band { center: 700.0, half_width: 300.0 },
        }
    }
}

impl TissueBands {
    pub fn band(&self, t: Tissue) -> Band {
        match t {
            Tissue::Air => self.air,
            Tissue::Lung => self.lung,
            Tissue::Soft => self.soft,
            Tissue::Bone => self.bone,
        }
    }

    /// Tissue whose band contains `v`, if any.
    pub fn classify(&self, v: f64) -> Option<Tissue> {
        Tissue::ALL.into_iter().find(|&t| self.band(t).contains(v))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub seed: u64,
    /// Soft-tissue ellipsoids; the first one is the body outline.
    pub organs: usize,
    pub lungs: usize,
    pub bones: usize,
    pub bands: TissueBands,
    /// Texture amplitude as a fraction of each band's half width.
    pub texture_amplitude: f64,
    /// Coarsest value-noise lattice spacing in voxels.
    pub texture_scale: f64,
}

impl PhantomSpec {
    pub fn new(dims: [usize; 3], seed: u64) -> Self {
        PhantomSpec { dims, seed, organs: 3, lungs: 2, bones: 2, bands: TissueBands::default(), texture_amplitude: 0.6, texture_scale: 6.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 16) {
            return Err(Error::InvalidArgument(format!("phantom dims must be >= 16, got {:?}", self.dims)));
        }
        let b = &self.bands;
        let ordered = b.air.hi() < b.lung.lo() && b.lung.hi() < b.soft.lo() && b.soft.hi() < b.bone.lo();
        if !ordered || [b.air, b.lung, b.soft, b.bone].iter().any(|x| !(x.half_width >= 0.0)) {
            return Err(Error::InvalidArgument("tissue bands must be ordered air < lung < soft < bone".into()));
        }
        if !(0.0..=1.0).contains(&self.texture_amplitude) || !(self.texture_scale >= 1.0) {
            return Err(Error::InvalidArgument("texture amplitude must be in [0, 1] and scale >= 1".into()));
        }
        Ok(())
    }
}

/// Axis-aligned ellipsoid, optionally hollow.
#[derive(Debug, Clone, PartialEq)]
pub struct Structure {
    pub tissue: Tissue,
    pub center: [f64; 3],
    pub radii: [f64; 3],
    /// Inner radius as a fraction of the outer one; 0 means solid.
    pub hollow: f64,
    /// Per-structure intensity shift, fraction of the band half width.
    pub offset: f64,
}

impl Structure {
    pub fn contains(&self, p: [f64; 3]) -> bool {
        let r2: f64 = (0..3).map(|i| ((p[i] - self.center[i]) / self.radii[i]).powi(2)).sum();
        r2 <= 1.0 && r2 >= self.hollow * self.hollow
    }
}

/// Structures in paint order (later entries overwrite earlier ones).
pub fn phantom_structures(spec: &PhantomSpec) -> Vec<Structure> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[0]));
    let d = spec.dims.map(|x| x as f64);
    let mid = d.map(|x| (x - 1.0) / 2.0);
    let mut out = Vec::new();
    if spec.organs > 0 {
        out.push(Structure {
            tissue: Tissue::Soft,
            center: mid,
            radii: [0.44 * d[0], 0.40 * d[1], 0.55 * d[2]],
            hollow: 0.0,
            offset: rng.random_range(-0.2..0.2),
        });
    }
    let inside = |rng: &mut ChaCha8Rng, spread: f64| -> [f64; 3] { [0, 1, 2].map(|i| mid[i] + rng.random_range(-spread..spread) * d[i]) };
    for _ in 1..spec.organs {
        let c = inside(&mut rng, 0.2);
        out.push(Structure {
            tissue: Tissue::Soft,
            center: c,
            radii: [0, 1, 2].map(|i| rng.random_range(0.08..0.18) * d[i]),
            hollow: 0.0,
            offset: rng.random_range(-0.4..0.4),
        });
    }
    for k in 0..spec.lungs {
        let mut c = inside(&mut rng, 0.1);
        // Alternate sides like left/right lungs.
        c[0] = mid[0] + if k % 2 == 0 { -0.18 } else { 0.18 } * d[0] + rng.random_range(-0.04..0.04) * d[0];
        out.push(Structure {
            tissue: Tissue::Lung,
            center: c,
            radii: [rng.random_range(0.12..0.18) * d[0], rng.random_range(0.18..0.26) * d[1], rng.random_range(0.25..0.4) * d[2]],
            hollow: 0.0,
            offset: rng.random_range(-0.3..0.3),
        });
    }
    for _ in 0..spec.bones {
        let c = inside(&mut rng, 0.28);
        out.push(Structure {
            tissue: Tissue::Bone,
            center: c,
            radii: [0, 1, 2].map(|i| rng.random_range(0.07..0.12) * d[i]),
            hollow: rng.random_range(0.5..0.7),
            offset: rng.random_range(-0.3..0.3),
        });
    }
    out
}

/// Smooth lattice noise in `[-1, 1]`, trilinearly interpolated.
struct ValueNoise {
    spacing: f64,
    dims: [usize; 3],
    lattice: Vec<f64>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, vol_dims: [usize; 3], spacing: f64) -> Self {
        let dims = vol_dims.map(|d| (d as f64 / spacing).ceil() as usize + 2);
        let lattice = (0..dims.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
        ValueNoise { spacing, dims, lattice }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        let q = p.map(|c| c / self.spacing);
        let i = q.map(|c| c.floor() as usize);
        let f = [q[0] - i[0] as f64, q[1] - i[1] as f64, q[2] - i[2] as f64];
        let idx = |x: usize, y: usize, z: usize| self.lattice[(z * self.dims[1] + y) * self.dims[0] + x];
        let mut acc = 0.0;
        for (dz, wz) in [(0, 1.0 - f[2]), (1, f[2])] {
            for (dy, wy) in [(0, 1.0 - f[1]), (1, f[1])] {
                for (dx, wx) in [(0, 1.0 - f[0]), (1, f[0])] {
                    acc += wx * wy * wz * idx(i[0] + dx, i[1] + dy, i[2] + dz);
                }
            }
        }
        acc
    }
}

pub fn generate_phantom(spec: &PhantomSpec) -> Result<Volume> {
    spec.validate()?;
    let structures = phantom_structures(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1]));
    let coarse = ValueNoise::new(&mut rng, spec.dims, spec.texture_scale);
    let fine = ValueNoise::new(&mut rng, spec.dims, (spec.texture_scale / 2.0).max(1.0));
    let bands = spec.bands;
    let amp = spec.texture_amplitude;

    let v = Volume::from_fn(spec.dims, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        let (tissue, offset) = structures.iter().rev().find(|s| s.contains(p)).map(|s| (s.tissue, s.offset)).unwrap_or((Tissue::Air, 0.0));
        let band = bands.band(tissue);
        let tex = 0.6 * coarse.at(p) + 0.4 * fine.at(p);
        (band.center + (offset + amp * tex) * band.half_width).clamp(band.lo(), band.hi())
    })?;
    Ok(v)
}

/// Default-spec phantoms with seeds derived per index.
pub fn dataset_specs(n: usize, dims: [usize; 3], seed: u64) -> Vec<PhantomSpec> {
    (0..n).map(|i| PhantomSpec::new(dims, derive_seed(seed, &[i as u64]))).collect()
}

pub fn generate_dataset(n: usize, dims: [usize; 3], seed: u64) -> Result<Vec<Volume>> {
    if n == 0 {
        return Err(Error::EmptyInput("dataset size must be at least 1".into()));
    }
    dataset_specs(n, dims, seed).iter().map(generate_phantom).collect()
}
