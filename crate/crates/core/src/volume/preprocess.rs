//! Histogram equalization and affine normalization, both recorded so that
//! generated volumes can be mapped back to the original intensity scale.

use serde::{Deserialize, Serialize};

use super::Volume;
use crate::error::{Error, Result};

pub const DEFAULT_BINS: usize = 4096;

/// Recorded equalization state.
///
/// `hist_lut[b]` is the equalized value in `[0, 1]` of input bin `b`;
/// `inv_lut[b]` is the representative input value of bin `b` (its centre,
/// except the first and last bins which map to `vmin` and `vmax`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessParams {
    pub bins: usize,
    pub hist_lut: Vec<f64>,
    pub inv_lut: Vec<f64>,
    pub vmin: f64,
    pub vmax: f64,
    pub bin_width: f64,
    /// Set when the source volume had a single value.
    pub constant: bool,
}

/// Intensity range sent to `[-1, 1]` by [`normalize`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lo: f64,
    pub hi: f64,
}

impl PreprocessParams {
    /// Linear ramp over `[vmin, vmax]`; equalization becomes min-max rescaling.
    pub fn identity(vmin: f64, vmax: f64, bins: usize) -> Result<Self> {
        if bins < 2 || !(vmax > vmin) {
            return Err(Error::InvalidParams(format!("identity lut needs bins >= 2 and vmax > vmin, got {bins}, [{vmin}, {vmax}]")));
        }
        let bin_width = (vmax - vmin) / bins as f64;
        let hist_lut = (0..bins).map(|b| b as f64 / (bins - 1) as f64).collect();
        Ok(PreprocessParams { bins, hist_lut, inv_lut: representative_values(vmin, vmax, bins), vmin, vmax, bin_width, constant: false })
    }

    fn constant_volume(value: f64, bins: usize) -> Self {
        PreprocessParams {
            bins,
            hist_lut: vec![0.0; bins],
            inv_lut: vec![value; bins],
            vmin: value,
            vmax: value,
            bin_width: 0.0,
            constant: true,
        }
    }

    #[inline]
    pub fn bin_of(&self, v: f64) -> usize {
        let b = ((v - self.vmin) / self.bin_width).floor();
        if b <= 0.0 {
            0
        } else {
            (b as usize).min(self.bins - 1)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hist_lut.len() != self.bins || self.inv_lut.len() != self.bins || self.bins < 2 {
            return Err(Error::InvalidParams(format!(
                "lut lengths {} / {} do not match bins {}",
                self.hist_lut.len(),
                self.inv_lut.len(),
                self.bins
            )));
        }
        if self.hist_lut.iter().any(|&e| !(0.0..=1.0).contains(&e)) {
            return Err(Error::InvalidParams("hist_lut leaves [0, 1]".into()));
        }
        if self.hist_lut.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParams("hist_lut is not monotone".into()));
        }
        if self.inv_lut.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidParams("inv_lut is not monotone".into()));
        }
        Ok(())
    }

    /// Maps an equalized value back to the input scale by piecewise-linear
    /// interpolation between occupied bins.
    fn invert(&self, knots: &[(f64, f64)], e: f64) -> f64 {
        if self.constant {
            return self.vmin;
        }
        let i = knots.partition_point(|&(k, _)| k <= e);
        if i == 0 {
            return knots[0].1;
        }
        if i == knots.len() {
            return knots[knots.len() - 1].1;
        }
        let (e0, v0) = knots[i - 1];
        let (e1, v1) = knots[i];
        v0 + (v1 - v0) * (e - e0) / (e1 - e0)
    }

    /// One knot per distinct LUT level, anchored at the first bin reaching it.
    fn knots(&self) -> Vec<(f64, f64)> {
        let mut out: Vec<(f64, f64)> = Vec::new();
        for (b, &e) in self.hist_lut.iter().enumerate() {
            if out.last().is_none_or(|&(prev, _)| e > prev) {
                out.push((e, self.inv_lut[b]));
            }
        }
        out
    }
}

fn representative_values(vmin: f64, vmax: f64, bins: usize) -> Vec<f64> {
    let w = (vmax - vmin) / bins as f64;
    let mut inv: Vec<f64> = (0..bins).map(|b| vmin + (b as f64 + 0.5) * w).collect();
    inv[0] = vmin;
    inv[bins - 1] = vmax;
    inv
}

/// Histogram-equalizes `v` with the CDF remap
/// `e(b) = (cdf(b) - cdf_min) / (1 - cdf_min)`.
pub fn equalize(v: &Volume, bins: usize) -> Result<(Volume, PreprocessParams)> {
    if bins < 2 {
        return Err(Error::InvalidArgument(format!("equalize needs at least 2 bins, got {bins}")));
    }
    let (vmin, vmax) = v.min_max();
    if vmax == vmin {
        let params = PreprocessParams::constant_volume(vmin, bins);
        return Ok((v.map(|_| 0.0), params));
    }
    let bin_width = (vmax - vmin) / bins as f64;
    let mut params = PreprocessParams {
        bins,
        hist_lut: Vec::new(),
        inv_lut: representative_values(vmin, vmax, bins),
        vmin,
        vmax,
        bin_width,
        constant: false,
    };

    let mut hist = vec![0u64; bins];
    for &x in v.data() {
        hist[params.bin_of(x)] += 1;
    }
    let n = v.len() as f64;
    let mut running = 0u64;
    let cdf: Vec<f64> = hist
        .iter()
        .map(|&c| {
            running += c;
            running as f64 / n
        })
        .collect();
    // vmin always lands in bin 0, so the first non-empty bin is bin 0.
    let cdf_min = cdf[0];
    params.hist_lut = cdf.iter().map(|&c| ((c - cdf_min) / (1.0 - cdf_min)).clamp(0.0, 1.0)).collect();

    let out = apply_equalization(v, &params);
    Ok((out, params))
}

/// Applies recorded equalization to any volume; values outside the recorded
/// range fall into the edge bins.
pub fn apply_equalization(v: &Volume, p: &PreprocessParams) -> Volume {
    if p.constant {
        return v.map(|_| 0.0);
    }
    v.map(|x| p.hist_lut[p.bin_of(x)])
}

/// Affine map of `[min, max]` onto `[-1, 1]`; a constant volume maps to 0.
pub fn normalize(v: &Volume) -> (Volume, Bounds) {
    let (lo, hi) = v.min_max();
    let bounds = Bounds { lo, hi };
    (apply_normalization(v, bounds), bounds)
}

pub fn apply_normalization(v: &Volume, b: Bounds) -> Volume {
    if b.hi == b.lo {
        return v.map(|_| 0.0);
    }
    let scale = 2.0 / (b.hi - b.lo);
    v.map(|x| (x - b.lo) * scale - 1.0)
}

/// Inverse of [`apply_normalization`]; inputs are clamped to `[-1, 1]`.
pub fn denormalize(v: &Volume, b: Bounds) -> Volume {
    if b.hi == b.lo {
        return v.map(|_| b.lo);
    }
    let half = (b.hi - b.lo) / 2.0;
    v.map(|x| (x.clamp(-1.0, 1.0) + 1.0) * half + b.lo)
}

pub fn unequalize(v: &Volume, p: &PreprocessParams) -> Result<Volume> {
    p.validate()?;
    let knots = p.knots();
    Ok(v.map(|e| p.invert(&knots, e)))
}

pub fn denormalize_and_unequalize(v: &Volume, p: &PreprocessParams, b: Bounds) -> Result<Volume> {
    unequalize(&denormalize(v, b), p)
}

/// Equalize then normalize, returning everything needed to undo both.
pub fn preprocess(v: &Volume) -> Result<(Volume, PreprocessParams, Bounds)> {
    let (eq, params) = equalize(v, DEFAULT_BINS)?;
    let (norm, bounds) = normalize(&eq);
    Ok((norm, params, bounds))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_volume(seed: u64, dims: [usize; 3], lo: f64, hi: f64) -> Volume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Volume::from_fn(dims, |_, _, _| rng.random_range(lo..hi)).unwrap()
    }

    #[test]
    fn constant_volume_equalizes_to_zero_and_restores() {
        let v = Volume::filled([4, 4, 4], 700.0);
        let (eq, p) = equalize(&v, DEFAULT_BINS).unwrap();
        assert!(p.constant);
        assert!(eq.data().iter().all(|&x| x == 0.0));
        let (norm, b) = normalize(&eq);
        let back = denormalize_and_unequalize(&norm, &p, b).unwrap();
        assert!(back.data().iter().all(|&x| x == 700.0));
    }

    #[test]
    fn two_valued_volume_maps_to_endpoints() {
        let v = Volume::from_fn([4, 4, 4], |x, _, _| if x < 2 { -1000.0 } else { 3000.0 }).unwrap();
        let (eq, _) = equalize(&v, DEFAULT_BINS).unwrap();
        for (orig, e) in v.data().iter().zip(eq.data()) {
            let expected = if *orig < 0.0 { 0.0 } else { 1.0 };
            assert_eq!(*e, expected);
        }
    }

    #[test]
    fn uniform_histogram_matches_min_max_rescale() {
        // One voxel at the centre of each of 4096 bins over [0, 4096).
        let bins = DEFAULT_BINS;
        let mut data: Vec<f64> = (0..bins).map(|b| b as f64 + 0.5).collect();
        data[0] = 0.0;
        data[bins - 1] = bins as f64;
        let v = Volume::new([16, 16, 16], data).unwrap();
        let (eq, p) = equalize(&v, bins).unwrap();
        // Direct CDF oracle: bin b holds b+1 of n voxels; cdf_min = 1/n.
        let n = bins as f64;
        for (i, &e) in eq.data().iter().enumerate() {
            let oracle = ((i as f64 + 1.0) / n - 1.0 / n) / (1.0 - 1.0 / n);
            assert!((e - oracle).abs() < 1e-12);
            let minmax = (v.data()[i] - p.vmin) / (p.vmax - p.vmin);
            assert!((e - minmax).abs() <= 1.0 / n + 1e-12, "voxel {i}: {e} vs {minmax}");
        }
    }

    #[test]
    fn normalize_examples() {
        let v = Volume::new([3, 1, 1], vec![0.0, 0.5, 1.0]).unwrap();
        let (n, b) = normalize(&v);
        assert_eq!(n.data(), &[-1.0, 0.0, 1.0]);
        assert_eq!(b, Bounds { lo: 0.0, hi: 1.0 });

        let v = Volume::new([2, 1, 1], vec![-1000.0, 3000.0]).unwrap();
        let (n, _) = normalize(&v);
        assert_eq!(n.data(), &[-1.0, 1.0]);

        let (n, b) = normalize(&Volume::filled([2, 2, 2], 42.0));
        assert!(n.data().iter().all(|&x| x == 0.0));
        assert_eq!(b, Bounds { lo: 42.0, hi: 42.0 });
    }

    #[test]
    fn constant_inverse_restores_42() {
        let v = Volume::filled([3, 3, 3], 42.0);
        let (norm, p, b) = preprocess(&v).unwrap();
        let back = denormalize_and_unequalize(&norm, &p, b).unwrap();
        assert!(back.data().iter().all(|&x| x == 42.0));
    }

    #[test]
    fn identity_lut_endpoints() {
        let p = PreprocessParams::identity(0.0, 1.0, DEFAULT_BINS).unwrap();
        let v = Volume::new([2, 1, 1], vec![-1.0, 1.0]).unwrap();
        let out = denormalize_and_unequalize(&v, &p, Bounds { lo: 0.0, hi: 1.0 }).unwrap();
        assert_eq!(out.data(), &[0.0, 1.0]);
    }

    #[test]
    fn non_monotone_lut_is_rejected() {
        let mut p = PreprocessParams::identity(0.0, 1.0, 8).unwrap();
        p.hist_lut.swap(2, 5);
        let v = Volume::filled([1, 1, 1], 0.0);
        assert!(matches!(unequalize(&v, &p), Err(Error::InvalidParams(_))));
    }

    #[test]
    fn random_round_trip_within_one_bin() {
        let v = random_volume(11, [16, 16, 16], -1000.0, 2000.0);
        let (norm, p, b) = preprocess(&v).unwrap();
        let back = denormalize_and_unequalize(&norm, &p, b).unwrap();
        let max_err = v.data().iter().zip(back.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(max_err <= p.bin_width, "max err {max_err} > bin width {}", p.bin_width);
        assert!(p.bin_width <= 3000.0 / 4096.0 + 1e-9);
    }

    #[test]
    fn lut_composition_reproduces_bin_centres() {
        let v = random_volume(5, [12, 12, 12], -500.0, 500.0);
        let (_, p) = equalize(&v, 256).unwrap();
        let knots = p.knots();
        for b in 0..p.bins {
            let centre = p.vmin + (b as f64 + 0.5) * p.bin_width;
            let e = p.hist_lut[p.bin_of(centre)];
            let back = p.invert(&knots, e);
            // Empty bins collapse onto the previous occupied bin, so only
            // occupied ones are expected to come back within a bin width.
            let occupied = b == 0 || p.hist_lut[b] > p.hist_lut[b - 1];
            if occupied {
                assert!((back - centre).abs() <= p.bin_width, "bin {b}: {back} vs {centre}");
            }
        }
    }

    proptest! {
        #[test]
        fn equalize_preserves_order(seed in 0u64..1000) {
            let v = random_volume(seed, [6, 5, 4], -100.0, 100.0);
            let (eq, p) = equalize(&v, 64).unwrap();
            prop_assert!(p.hist_lut.windows(2).all(|w| w[0] <= w[1]));
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v.data()[a].total_cmp(&v.data()[b]));
            for w in idx.windows(2) {
                prop_assert!(eq.data()[w[0]] <= eq.data()[w[1]]);
            }
        }

        #[test]
        fn normalize_with_shared_bounds_is_monotone(seed in 0u64..1000, shift in 0.0f64..50.0) {
            let u = random_volume(seed, [4, 4, 4], -100.0, 100.0);
            let w = u.map(|x| x + shift);
            let b = Bounds { lo: -100.0, hi: 150.0 };
            let (nu, nw) = (apply_normalization(&u, b), apply_normalization(&w, b));
            prop_assert!(nu.data().iter().zip(nw.data()).all(|(a, b)| a <= b));
        }

        #[test]
        fn full_round_trip_error_is_at_most_one_bin(seed in 0u64..1000, span in 1.0f64..5000.0) {
            let v = random_volume(seed, [7, 6, 5], -span / 2.0, span / 2.0);
            let (norm, p, b) = preprocess(&v).unwrap();
            let back = denormalize_and_unequalize(&norm, &p, b).unwrap();
            for (a, r) in v.data().iter().zip(back.data()) {
                prop_assert!((a - r).abs() <= p.bin_width);
            }
        }
    }
}
