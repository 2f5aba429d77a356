use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub const DEFAULT_WINDOW: usize = 7;
pub const DEFAULT_K1: f64 = 0.01;
pub const DEFAULT_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SsimMode {
    /// One set of statistics over every voxel.
    Global,
    /// Mean over all valid cubic windows with uniform weights.
    Windowed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub mode: SsimMode,
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
    pub data_range: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams { mode: SsimMode::Windowed, window: DEFAULT_WINDOW, k1: DEFAULT_K1, k2: DEFAULT_K2, data_range: 1.0 }
    }
}

impl SsimParams {
    pub fn global(data_range: f64) -> Self {
        SsimParams { mode: SsimMode::Global, data_range, ..Default::default() }
    }

    pub fn windowed(window: usize, data_range: f64) -> Self {
        SsimParams { mode: SsimMode::Windowed, window, data_range, ..Default::default() }
    }
}

fn same_dims(a: &Volume, b: &Volume) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!("volumes differ in shape: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range > 0.0) || !data_range.is_finite() {
        return Err(Error::InvalidArgument(format!("data range must be positive, got {data_range}")));
    }
    Ok(())
}

/// Mean squared difference after scaling both inputs by `1 / data_range`.
pub fn mse(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    same_dims(a, b)?;
    check_range(data_range)?;
    Ok(mse_raw(a.data(), b.data()) / (data_range * data_range))
}

fn mse_raw(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// `10 log10(L^2 / MSE)`; `+inf` for identical inputs.
pub fn psnr(a: &Volume, b: &Volume, data_range: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b, data_range)?))
}

/// PSNR of an already range-normalized MSE.
pub fn psnr_from_mse(m: f64) -> f64 {
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sa: f64,
    sb: f64,
    saa: f64,
    sbb: f64,
    sab: f64,
}

impl Moments {
    fn ssim(&self, c1: f64, c2: f64) -> f64 {
        let ma = self.sa / self.n;
        let mb = self.sb / self.n;
        let va = (self.saa / self.n - ma * ma).max(0.0);
        let vb = (self.sbb / self.n - mb * mb).max(0.0);
        let cov = self.sab / self.n - ma * mb;
        let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        s.clamp(-1.0, 1.0)
    }
}

pub fn ssim(a: &Volume, b: &Volume, p: &SsimParams) -> Result<f64> {
    same_dims(a, b)?;
    check_range(p.data_range)?;
    let c1 = (p.k1 * p.data_range).powi(2);
    let c2 = (p.k2 * p.data_range).powi(2);
    match p.mode {
        SsimMode::Global => {
            let mut m = Moments { n: a.len() as f64, ..Default::default() };
            for (&x, &y) in a.data().iter().zip(b.data()) {
                m.sa += x;
                m.sb += y;
                m.saa += x * x;
                m.sbb += y * y;
                m.sab += x * y;
            }
            Ok(m.ssim(c1, c2))
        }
        SsimMode::Windowed => windowed_ssim(a, b, p.window, c1, c2),
    }
}

/// Window extent per axis; axes of extent 1 (2-d slices) are not windowed.
fn window_extents(dims: [usize; 3], window: usize) -> Result<[usize; 3]> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("SSIM window must be odd, got {window}")));
    }
    let w = dims.map(|d| if d == 1 { 1 } else { window });
    if dims.iter().zip(&w).any(|(&d, &w)| w > d) {
        return Err(Error::InvalidArgument(format!("SSIM window {window} exceeds volume dims {dims:?}")));
    }
    Ok(w)
}

/// Sums of `w` consecutive entries along `axis`, keeping the valid part.
fn box_sum(data: &[f64], dims: [usize; 3], axis: usize, w: usize) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] - w + 1;
    let stride = match axis {
        0 => 1,
        1 => dims[0],
        _ => dims[0] * dims[1],
    };
    let [ox, oy, oz] = out_dims;
    let mut out = Vec::with_capacity(ox * oy * oz);
    for z in 0..oz {
        for y in 0..oy {
            for x in 0..ox {
                let base = (z * dims[1] + y) * dims[0] + x;
                out.push((0..w).map(|k| data[base + k * stride]).sum());
            }
        }
    }
    (out, out_dims)
}

fn window_sums(data: Vec<f64>, dims: [usize; 3], w: [usize; 3]) -> Vec<f64> {
    let (mut cur, mut d) = (data, dims);
    for axis in 0..3 {
        if w[axis] > 1 {
            let (next, nd) = box_sum(&cur, d, axis, w[axis]);
            cur = next;
            d = nd;
        }
    }
    cur
}

fn windowed_ssim(a: &Volume, b: &Volume, window: usize, c1: f64, c2: f64) -> Result<f64> {
    let dims = a.dims();
    let w = window_extents(dims, window)?;
    let (x, y) = (a.data(), b.data());
    let prod = |f: fn(f64, f64) -> f64| x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect::<Vec<_>>();
    let sa = window_sums(x.to_vec(), dims, w);
    let sb = window_sums(y.to_vec(), dims, w);
    let saa = window_sums(prod(|p, _| p * p), dims, w);
    let sbb = window_sums(prod(|_, q| q * q), dims, w);
    let sab = window_sums(prod(|p, q| p * q), dims, w);
    let n = (w[0] * w[1] * w[2]) as f64;
    let total: f64 = (0..sa.len()).map(|i| Moments { n, sa: sa[i], sb: sb[i], saa: saa[i], sbb: sbb[i], sab: sab[i] }.ssim(c1, c2)).sum();
    Ok(total / sa.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.random::<f64>()).unwrap()
    }

    #[test]
    fn mse_examples() {
        let a = random([5, 4, 3], 1);
        assert_eq!(mse(&a, &a, 1.0).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((mse(&a, &b, 1.0).unwrap() - 0.01).abs() < 1e-12);
        let c = random([5, 4, 3], 2);
        let mut oracle = 0.0;
        for z in 0..3 {
            for y in 0..4 {
                for x in 0..5 {
                    oracle += (a.get(x, y, z) - c.get(x, y, z)).powi(2);
                }
            }
        }
        assert!((mse(&a, &c, 1.0).unwrap() - oracle / 60.0).abs() < 1e-12);
        assert!(mse(&a, &random([5, 4, 4], 1), 1.0).is_err());
    }

    #[test]
    fn psnr_examples() {
        assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
        assert_eq!(psnr_from_mse(1.0), 0.0);
        let a = random([4, 4, 4], 3);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &a, 0.0).is_err());
    }

    #[test]
    fn ssim_constant_pair_by_hand() {
        let a = Volume::filled([4, 4, 4], 0.5);
        let b = Volume::filled([4, 4, 4], 0.25);
        let s = ssim(&a, &b, &SsimParams::global(1.0)).unwrap();
        let want = (2.0 * 0.5 * 0.25 + 1e-4) / (0.25 + 0.0625 + 1e-4);
        assert!((s - want).abs() < 1e-12);
        assert!((s - 0.80006).abs() < 1e-5);
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = random([9, 9, 9], 4);
        assert_eq!(ssim(&a, &a, &SsimParams::global(1.0)).unwrap(), 1.0);
        assert_eq!(ssim(&a, &a, &SsimParams::default()).unwrap(), 1.0);
    }

    fn brute_windowed(a: &Volume, b: &Volume, w: usize, l: f64) -> f64 {
        let [nx, ny, nz] = a.dims();
        let (c1, c2) = ((0.01 * l).powi(2), (0.03 * l).powi(2));
        let mut total = 0.0;
        let mut count = 0;
        for z0 in 0..=nz - w {
            for y0 in 0..=ny - w {
                for x0 in 0..=nx - w {
                    let mut xs = Vec::new();
                    let mut ys = Vec::new();
                    for z in z0..z0 + w {
                        for y in y0..y0 + w {
                            for x in x0..x0 + w {
                                xs.push(a.get(x, y, z));
                                ys.push(b.get(x, y, z));
                            }
                        }
                    }
                    let n = xs.len() as f64;
                    let ma = xs.iter().sum::<f64>() / n;
                    let mb = ys.iter().sum::<f64>() / n;
                    let va = xs.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
                    let vb = ys.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
                    let cov = xs.iter().zip(&ys).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / n;
                    total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                    count += 1;
                }
            }
        }
        total / count as f64
    }

    #[test]
    fn windowed_matches_brute_force() {
        let a = random([12, 12, 12], 5);
        let b = a.map(|v| (v * 0.8 + 0.1).sin());
        let fast = ssim(&a, &b, &SsimParams::windowed(7, 1.0)).unwrap();
        assert!((fast - brute_windowed(&a, &b, 7, 1.0)).abs() < 1e-9);
        let c = random([12, 12, 12], 6);
        let fast = ssim(&a, &c, &SsimParams::windowed(5, 1.0)).unwrap();
        assert!((fast - brute_windowed(&a, &c, 5, 1.0)).abs() < 1e-9);
    }

    #[test]
    fn window_covering_volume_equals_global() {
        let a = random([7, 7, 7], 7);
        let b = random([7, 7, 7], 8);
        let g = ssim(&a, &b, &SsimParams::global(1.0)).unwrap();
        let w = ssim(&a, &b, &SsimParams::windowed(7, 1.0)).unwrap();
        assert!((g - w).abs() < 1e-12);
    }

    #[test]
    fn window_validation_and_slices() {
        let a = random([6, 6, 6], 9);
        assert!(ssim(&a, &a, &SsimParams::windowed(7, 1.0)).is_err());
        assert!(ssim(&a, &a, &SsimParams::windowed(4, 1.0)).is_err());
        let s = random([9, 8, 1], 10);
        let t = random([9, 8, 1], 11);
        let v = ssim(&s, &t, &SsimParams::windowed(7, 1.0)).unwrap();
        assert!((-1.0..=1.0).contains(&v));
    }

    #[test]
    fn affine_rescaling_invariance() {
        let a = random([8, 8, 8], 12);
        let b = random([8, 8, 8], 13);
        let (sa, sb) = (a.map(|v| 300.0 * v - 1000.0), b.map(|v| 300.0 * v - 1000.0));
        let p1 = psnr(&a, &b, 1.0).unwrap();
        let p2 = psnr(&sa, &sb, 300.0).unwrap();
        assert!((p1 - p2).abs() < 1e-9);
        // SSIM's luminance term is shift-sensitive; only pure scaling is invariant.
        let (ka, kb) = (a.map(|v| 300.0 * v), b.map(|v| 300.0 * v));
        for p in [SsimParams::global(1.0), SsimParams::windowed(5, 1.0)] {
            let s1 = ssim(&a, &b, &p).unwrap();
            let s2 = ssim(&ka, &kb, &SsimParams { data_range: 300.0, ..p }).unwrap();
            assert!((s1 - s2).abs() < 1e-9);
        }
    }

    proptest! {
        #[test]
        fn ssim_symmetric_and_bounded(seed in 0u64..1000, window in prop_oneof![Just(3usize), Just(5)]) {
            let a = random([6, 7, 5], seed);
            let b = random([6, 7, 5], seed + 5000);
            for p in [SsimParams::global(1.0), SsimParams::windowed(window, 1.0)] {
                let ab = ssim(&a, &b, &p).unwrap();
                let ba = ssim(&b, &a, &p).unwrap();
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!((-1.0..=1.0).contains(&ab));
            }
        }

        #[test]
        fn psnr_decreases_with_noise(seed in 0u64..1000) {
            let a = random([8, 8, 8], seed);
            let noise = random([8, 8, 8], seed + 7000).map(|v| v - 0.5);
            let scores: Vec<f64> = [0.01, 0.05, 0.1]
                .iter()
                .map(|&amp| {
                    let b = Volume::new(a.dims(), a.data().iter().zip(noise.data()).map(|(x, n)| x + amp * n).collect()).unwrap();
                    psnr(&a, &b, 1.0).unwrap()
                })
                .collect();
            prop_assert!(scores[0] > scores[1] && scores[1] > scores[2]);
        }
    }
}
