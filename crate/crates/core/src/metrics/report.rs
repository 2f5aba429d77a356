use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::quality::{mse, psnr_from_mse, ssim, SsimMode, SsimParams, DEFAULT_WINDOW};
use crate::error::{Error, Result};
use crate::volume::Volume;

/// Decibel values that may be `+inf`; serialized as the string `"inf"`.
mod db {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            Repr::Num(*v).serialize(s)
        } else if *v > 0.0 {
            Repr::Text("inf".into()).serialize(s)
        } else {
            Repr::Text("nan".into()).serialize(s)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => t.parse::<f64>().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub z: usize,
    #[serde(with = "db")]
    pub psnr_db: f64,
    pub ssim: f64,
    /// Zero-MSE slice; excluded from the PSNR mean.
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub data_range: f64,
    pub ssim_mode: SsimMode,
    pub window: usize,
    /// Whole-volume metrics.
    #[serde(with = "db")]
    pub psnr_db: f64,
    pub ssim: f64,
    /// Means over axial slices.
    #[serde(with = "db")]
    pub mean_slice_psnr_db: f64,
    pub mean_slice_ssim: f64,
    pub identical_slices: usize,
    pub per_slice: Vec<SliceMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Defaults to the real volume's value range (1 when constant).
    pub data_range: Option<f64>,
    pub ssim_mode: SsimMode,
    pub window: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { data_range: None, ssim_mode: SsimMode::Windowed, window: DEFAULT_WINDOW }
    }
}

/// Falls back to global SSIM when the window does not fit.
fn ssim_fitting(a: &Volume, b: &Volume, mode: SsimMode, window: usize, data_range: f64) -> Result<f64> {
    let fits = a.dims().iter().all(|&d| d == 1 || d >= window);
    let p = match mode {
        SsimMode::Windowed if fits => SsimParams::windowed(window, data_range),
        _ => SsimParams::global(data_range),
    };
    ssim(a, b, &p)
}

pub fn evaluate_pair(real: &Volume, generated: &Volume, opts: &EvalOptions) -> Result<QualityReport> {
    if real.dims() != generated.dims() {
        return Err(Error::ShapeMismatch(format!("real {:?} and generated {:?} volumes differ in shape", real.dims(), generated.dims())));
    }
    let l = opts.data_range.unwrap_or_else(|| {
        let (lo, hi) = real.min_max();
        if hi > lo {
            hi - lo
        } else {
            1.0
        }
    });
    let [nx, ny, nz] = real.dims();
    let slice = |v: &Volume, z: usize| Volume::new([nx, ny, 1], v.axial_slice(z).to_vec());
    let per_slice: Result<Vec<SliceMetrics>> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let (a, b) = (slice(real, z)?, slice(generated, z)?);
            let m = mse(&a, &b, l)?;
            Ok(SliceMetrics {
                z,
                psnr_db: psnr_from_mse(m),
                ssim: ssim_fitting(&a, &b, opts.ssim_mode, opts.window, l)?,
                identical: m == 0.0,
            })
        })
        .collect();
    let per_slice = per_slice?;
    let identical_slices = per_slice.iter().filter(|s| s.identical).count();
    let finite: Vec<f64> = per_slice.iter().filter(|s| !s.identical).map(|s| s.psnr_db).collect();
    let mean_slice_psnr_db = if finite.is_empty() { f64::INFINITY } else { finite.iter().sum::<f64>() / finite.len() as f64 };
    let mean_slice_ssim = per_slice.iter().map(|s| s.ssim).sum::<f64>() / nz as f64;
    Ok(QualityReport {
        data_range: l,
        ssim_mode: opts.ssim_mode,
        window: opts.window,
        psnr_db: psnr_from_mse(mse(real, generated, l)?),
        ssim: ssim_fitting(real, generated, opts.ssim_mode, opts.window, l)?,
        mean_slice_psnr_db,
        mean_slice_ssim,
        identical_slices,
        per_slice,
    })
}

fn fmt_db(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.2}")
    }
}

/// Human-readable summary with one row per slice.
pub fn format_report(r: &QualityReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "data range      {}", r.data_range);
    let _ = writeln!(s, "ssim mode       {:?} (window {})", r.ssim_mode, r.window);
    let _ = writeln!(s, "volume  PSNR {:>8} dB  SSIM {:.4}", fmt_db(r.psnr_db), r.ssim);
    let _ = writeln!(
        s,
        "slices  PSNR {:>8} dB  SSIM {:.4}  ({} identical of {})",
        fmt_db(r.mean_slice_psnr_db),
        r.mean_slice_ssim,
        r.identical_slices,
        r.per_slice.len()
    );
    let _ = writeln!(s, "{:>6} {:>10} {:>8}", "z", "PSNR(dB)", "SSIM");
    for m in &r.per_slice {
        let _ = writeln!(s, "{:>6} {:>10} {:>8.4}", m.z, fmt_db(m.psnr_db), m.ssim);
    }
    s
}

pub fn save_report(path: impl AsRef<Path>, r: &QualityReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(r)?)?;
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<QualityReport> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(dims: [usize; 3], f: impl Fn(usize, usize, usize) -> f64) -> Volume {
        Volume::from_fn(dims, f).unwrap()
    }

    #[test]
    fn identical_volumes() {
        let a = vol([10, 9, 4], |x, y, z| (x * 7 + y * 3 + z) as f64);
        let r = evaluate_pair(&a, &a, &EvalOptions::default()).unwrap();
        assert_eq!(r.mean_slice_ssim, 1.0);
        assert_eq!(r.identical_slices, 4);
        assert!(r.per_slice.iter().all(|s| s.identical && s.psnr_db.is_infinite()));
        assert_eq!(r.mean_slice_psnr_db, f64::INFINITY);
        assert_eq!(r.psnr_db, f64::INFINITY);
    }

    #[test]
    fn zero_mse_slices_are_excluded_from_mean() {
        let a = vol([8, 8, 3], |x, y, _| (x + y) as f64 / 14.0);
        // Slice 1 differs by 0.1 on unit range: 20 dB.
        let b = vol([8, 8, 3], |x, y, z| a.get(x, y, z) + if z == 1 { 0.1 } else { 0.0 });
        let r = evaluate_pair(&a, &b, &EvalOptions { data_range: Some(1.0), ..Default::default() }).unwrap();
        assert_eq!(r.identical_slices, 2);
        assert!((r.mean_slice_psnr_db - 20.0).abs() < 1e-9);
        assert!((-1.0..=1.0).contains(&r.ssim));
        assert_eq!(r.data_range, 1.0);
        let auto = evaluate_pair(&a, &b, &EvalOptions::default()).unwrap();
        assert!((auto.data_range - 1.0).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let a = Volume::filled([4, 4, 4], 0.0);
        let b = Volume::filled([4, 4, 5], 0.0);
        assert!(evaluate_pair(&a, &b, &EvalOptions::default()).is_err());
    }

    #[test]
    fn json_round_trip_with_inf() {
        let a = vol([8, 8, 2], |x, y, z| (x * y + z) as f64);
        let b = vol([8, 8, 2], |x, y, z| if z == 0 { a.get(x, y, z) } else { a.get(x, y, z) + 1.0 });
        let r = evaluate_pair(&a, &b, &EvalOptions::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.report.json");
        save_report(&path, &r).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("\"inf\""));
        assert_eq!(load_report(&path).unwrap(), r);
        let table = format_report(&r);
        assert!(table.contains("inf"));
        assert_eq!(table.lines().count(), 5 + 2);
    }
}
