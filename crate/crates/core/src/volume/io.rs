use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{BlockGrid, Bounds, PreprocessParams, Volume};
use crate::error::{Error, Result};
use crate::synth::PhantomSpec;

pub const CTV_MAGIC: &[u8; 4] = b"CTV1";
const HEADER_LEN: u64 = 16;
const MAX_VOXELS: u64 = 1 << 32;

/// Writes `v` as CTV1. Voxels are stored as f32, so values that are not
/// exactly representable in single precision are rounded.
pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    if let Some(i) = v.data().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFiniteVoxel(i));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CTV_MAGIC)?;
    for d in v.dims() {
        let d = u32::try_from(d).map_err(|_| Error::DimensionOverflow(v.dims().map(|d| d as u64)))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for &x in v.data() {
        w.write_all(&(x as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let file = File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_header_bytes(&mut r, &mut magic, file_len)?;
    if &magic != CTV_MAGIC {
        return Err(Error::BadMagic { expected: "CTV1", found: String::from_utf8_lossy(&magic).into_owned() });
    }
    let mut dims = [0u64; 3];
    for d in dims.iter_mut() {
        let mut b = [0u8; 4];
        read_header_bytes(&mut r, &mut b, file_len)?;
        *d = u32::from_le_bytes(b) as u64;
    }
    let count = dims.iter().product::<u64>();
    if dims.contains(&0) || count > MAX_VOXELS {
        return Err(Error::DimensionOverflow(dims));
    }
    let expected = count * 4;
    let found = file_len.saturating_sub(HEADER_LEN);
    if found < expected {
        return Err(Error::TruncatedFile { expected, found });
    }

    let mut payload = vec![0u8; expected as usize];
    r.read_exact(&mut payload)?;
    let data: Vec<f64> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    Volume::new(dims.map(|d| d as usize), data)
}

fn read_header_bytes(r: &mut impl Read, buf: &mut [u8], file_len: u64) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::TruncatedFile { expected: HEADER_LEN, found: file_len },
        _ => Error::Io(e),
    })
}

/// Sidecar metadata stored next to a CTV1 file as `<basename>.meta.json`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VolumeMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preprocess: Option<PreprocessParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Bounds>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<BlockGrid>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phantom: Option<PhantomSpec>,
}

/// `scan.ctv` -> `scan.meta.json`.
pub fn meta_path(volume_path: impl AsRef<Path>) -> PathBuf {
    let p = volume_path.as_ref();
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    p.with_file_name(format!("{stem}.meta.json"))
}

pub fn save_meta(volume_path: impl AsRef<Path>, meta: &VolumeMeta) -> Result<()> {
    let text = serde_json::to_string_pretty(meta)?;
    fs::write(meta_path(volume_path), text)?;
    Ok(())
}

/// Returns `Ok(None)` when no sidecar exists.
pub fn load_meta(volume_path: impl AsRef<Path>) -> Result<Option<VolumeMeta>> {
    let p = meta_path(volume_path);
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(p)?;
    Ok(Some(serde_json::from_str(&text)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn write_raw(path: &Path, magic: &[u8], dims: [u32; 3], voxels: usize) {
        let mut bytes = magic.to_vec();
        for d in dims {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend(std::iter::repeat_n(0u8, voxels * 4));
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn loads_zero_volume() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("z.ctv");
        write_raw(&p, b"CTV1", [4, 4, 4], 64);
        let v = load_volume(&p).unwrap();
        assert_eq!(v.dims(), [4, 4, 4]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ctv");
        write_raw(&p, b"XXXX", [4, 4, 4], 64);
        assert!(matches!(load_volume(&p), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn rejects_truncated_payload() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.ctv");
        write_raw(&p, b"CTV1", [4, 4, 4], 32);
        assert!(matches!(load_volume(&p), Err(Error::TruncatedFile { expected: 256, found: 128 })));
    }

    #[test]
    fn rejects_zero_and_huge_dims() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.ctv");
        write_raw(&p, b"CTV1", [0, 4, 4], 0);
        assert!(matches!(load_volume(&p), Err(Error::DimensionOverflow(_))));
        write_raw(&p, b"CTV1", [65536, 65536, 2], 0);
        assert!(matches!(load_volume(&p), Err(Error::DimensionOverflow(_))));
    }

    #[test]
    fn rejects_non_finite_voxels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nan.ctv");
        let mut bytes = b"CTV1".to_vec();
        for d in [1u32, 1, 2] {
            bytes.extend_from_slice(&d.to_le_bytes());
        }
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        bytes.extend_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&p, bytes).unwrap();
        assert!(matches!(load_volume(&p), Err(Error::NonFiniteVoxel(1))));
        assert!(matches!(Volume::new([2, 1, 1], vec![0.0, f64::NAN]), Err(Error::NonFiniteVoxel(1))));
    }

    #[test]
    fn random_volume_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.ctv");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let v = Volume::new([8, 8, 8], (0..512).map(|_| rng.random_range(-1000.0f32..3000.0) as f64).collect()).unwrap();
        save_volume(&v, &p).unwrap();
        let back = load_volume(&p).unwrap();
        assert_eq!(back.dims(), v.dims());
        assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn file_size_matches_format_arithmetic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.ctv");
        let v = Volume::filled([512, 512, 90], -1000.0);
        save_volume(&v, &p).unwrap();
        assert_eq!(fs::metadata(&p).unwrap().len(), 16 + 4 * 512 * 512 * 90);
    }

    #[test]
    fn sidecar_path_and_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scan.ctv");
        assert_eq!(meta_path(&p), dir.path().join("scan.meta.json"));
        assert_eq!(load_meta(&p).unwrap(), None);
        let meta = VolumeMeta { bounds: Some(Bounds { lo: -3.0, hi: 5.0 }), ..Default::default() };
        save_meta(&p, &meta).unwrap();
        assert_eq!(load_meta(&p).unwrap(), Some(meta));
    }
}
