//! Exports matched real/generated axial slices as anonymized 8-bit image
//! pairs for a human discrimination test, with a sealed answer key.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::volume::{load_meta, load_volume, Volume};

pub const ANSWER_KEY_NAME: &str = "answer_key.txt";
pub const ANSWER_SEAL_NAME: &str = "answer_key.sha256";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

impl Side {
    pub fn label(self) -> &'static str {
        match self {
            Side::A => "a",
            Side::B => "b",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlindPair {
    pub index: usize,
    /// File name shared by the real and generated volumes.
    pub source: String,
    pub z: usize,
    /// Which image of the pair is the real slice.
    pub real: Side,
}

impl BlindPair {
    pub fn image_name(&self, side: Side) -> String {
        format!("pair{:02}_{}.pgm", self.index, side.label())
    }
}

/// Volumes present under the same file name in both directories, with equal
/// dims, in name order.
pub fn matched_volumes(real_dir: &Path, gen_dir: &Path) -> Result<Vec<(String, Volume, Volume)>> {
    let list = |dir: &Path| -> Result<BTreeMap<String, PathBuf>> {
        let mut out = BTreeMap::new();
        for entry in fs::read_dir(dir)? {
            let path = entry?.path();
            if path.extension().is_some_and(|e| e == "ctv") {
                out.insert(path.file_name().unwrap_or_default().to_string_lossy().into_owned(), path);
            }
        }
        Ok(out)
    };
    let gens = list(gen_dir)?;
    let mut out = Vec::new();
    for (name, path) in list(real_dir)? {
        if let Some(gp) = gens.get(&name) {
            let (r, g) = (load_volume(&path)?, load_volume(gp)?);
            if r.dims() == g.dims() {
                out.push((name, r, g));
            }
        }
    }
    Ok(out)
}

/// Maps `[lo, hi]` linearly onto `0..=255`.
pub fn slice_to_gray(v: &Volume, z: usize, lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    v.axial_slice(z).iter().map(|&x| ((x - lo) / span * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

pub fn write_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::LengthMismatch { len: pixels.len(), dims: [width, height, 1] });
    }
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    fs::write(path, bytes)?;
    Ok(())
}

/// Parses a binary PGM; returns `(width, height, maxval, pixels)`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::Format { path: path.display().to_string(), msg: msg.into() };
    let mut fields = Vec::new();
    let mut at = 0;
    while fields.len() < 4 {
        while at < bytes.len() && bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        let start = at;
        while at < bytes.len() && !bytes[at].is_ascii_whitespace() {
            at += 1;
        }
        if start == at {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..at]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    let pixels = bytes.get(at + 1..).ok_or_else(|| bad("missing pixel data"))?.to_vec();
    if pixels.len() != w * h {
        return Err(bad("pixel count does not match header"));
    }
    Ok((w, h, max, pixels))
}

/// Display window for a real volume: the raw range recorded in its sidecar
/// if present, otherwise its own min and max.
fn display_window(real_path: &Path, real: &Volume) -> Result<(f64, f64)> {
    Ok(match load_meta(real_path)?.and_then(|m| m.preprocess) {
        Some(p) => (p.vmin, p.vmax),
        None => real.min_max(),
    })
}

/// Samples `pairs` matched slices and writes `pair{i}_{a,b}.pgm`, the answer
/// key and its SHA-256 seal into `out_dir`.
pub fn export_blind_test(real_dir: &Path, gen_dir: &Path, out_dir: &Path, pairs: usize, seed: u64) -> Result<Vec<BlindPair>> {
    let vols = matched_volumes(real_dir, gen_dir)?;
    let slots: Vec<(usize, usize)> = vols.iter().enumerate().flat_map(|(i, (_, r, _))| (0..r.dims()[2]).map(move |z| (i, z))).collect();
    if pairs == 0 || slots.len() < pairs {
        return Err(Error::NotEnoughSlices { needed: pairs, found: slots.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks = sample(&mut rng, slots.len(), pairs).into_vec();
    fs::create_dir_all(out_dir)?;
    let mut key = String::new();
    let _ = writeln!(key, "# blind test, seed {seed}, {pairs} pairs");
    let mut out = Vec::with_capacity(pairs);
    for (index, pick) in picks.into_iter().enumerate() {
        let (vi, z) = slots[pick];
        let (name, real, generated) = &vols[vi];
        let real_side = if rng.random::<bool>() { Side::A } else { Side::B };
        let (lo, hi) = display_window(&real_dir.join(name), real)?;
        let [w, h, _] = real.dims();
        let pair = BlindPair { index: index + 1, source: name.clone(), z, real: real_side };
        let (real_img, gen_img) = (slice_to_gray(real, z, lo, hi), slice_to_gray(generated, z, lo, hi));
        let (a, b) = if real_side == Side::A { (&real_img, &gen_img) } else { (&gen_img, &real_img) };
        write_pgm(out_dir.join(pair.image_name(Side::A)), w, h, a)?;
        write_pgm(out_dir.join(pair.image_name(Side::B)), w, h, b)?;
        let fake_side = if real_side == Side::A { Side::B } else { Side::A };
        let _ = writeln!(
            key,
            "pair{:02} real={} generated={} source={} z={}",
            pair.index,
            pair.image_name(real_side),
            pair.image_name(fake_side),
            name,
            z
        );
        out.push(pair);
    }
    fs::write(out_dir.join(ANSWER_KEY_NAME), &key)?;
    let digest = Sha256::digest(key.as_bytes());
    let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
    fs::write(out_dir.join(ANSWER_SEAL_NAME), format!("{hex}  {ANSWER_KEY_NAME}\n"))?;
    Ok(out)
}

/// Reads back `(pair index, real image name)` entries from an answer key.
pub fn read_answer_key(path: impl AsRef<Path>) -> Result<Vec<(usize, String)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let bad = |line: &str| Error::Format { path: path.display().to_string(), msg: format!("bad answer line '{line}'") };
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.starts_with('#') && !l.trim().is_empty()) {
        let mut parts = line.split_whitespace();
        let idx = parts.next().and_then(|p| p.strip_prefix("pair")).and_then(|n| n.parse().ok()).ok_or_else(|| bad(line))?;
        let real = parts.next().and_then(|p| p.strip_prefix("real=")).ok_or_else(|| bad(line))?;
        out.push((idx, real.to_string()));
    }
    Ok(out)
}
