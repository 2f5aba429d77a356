//! Binary trainer snapshots.
//!
//! Layout (little endian): `CKPT`, version `u32`, element width `u8` (4 or 8),
//! length-prefixed JSON metadata (configs and epoch), named parameter
//! tensors, Adam state per network, loss history, then the RNG state
//! (32-byte seed, `u64` stream, `u128` word position).

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{DiscriminatorConfig, GeneratorConfig, TrainConfig};
use super::model::{Discriminator, Generator};
use super::train::{EpochLoss, Trainer};
use crate::autodiff::{Adam, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 4] = b"CKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    train_cfg: TrainConfig,
    epoch: usize,
}

struct Writer<W: Write> {
    w: W,
    width: u8,
}

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.w.write_all(b)?;
        Ok(())
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
        self.bytes(&v.to_le_bytes())
    }

    fn tensor<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        self.u32(name.len())?;
        self.bytes(name.as_bytes())?;
        self.u32(t.shape().len())?;
        for &d in t.shape() {
            self.u32(d)?;
        }
        let mut buf = Vec::with_capacity(t.len() * self.width as usize);
        for v in t.data() {
            if self.width == 4 {
                buf.extend_from_slice(&(v.f64() as f32).to_le_bytes());
            } else {
                buf.extend_from_slice(&v.f64().to_le_bytes());
            }
        }
        self.bytes(&buf)
    }

    fn store<T: Scalar>(&mut self, prefix: &str, s: &ParamStore<T>) -> Result<()> {
        self.u32(s.len())?;
        for (name, t) in s.iter() {
            self.tensor(&format!("{prefix}/{name}"), t)?;
        }
        Ok(())
    }

    fn adam<T: Scalar>(&mut self, prefix: &str, a: &Adam<T>) -> Result<()> {
        self.bytes(&a.t.to_le_bytes())?;
        self.u32(a.m.len())?;
        for (i, (m, v)) in a.m.iter().zip(&a.v).enumerate() {
            self.tensor(&format!("{prefix}/m{i}"), m)?;
            self.tensor(&format!("{prefix}/v{i}"), v)?;
        }
        Ok(())
    }
}

pub fn save_checkpoint<T: Scalar>(t: &Trainer<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    // Write to a sibling then rename so an interrupted save never leaves a
    // truncated checkpoint behind.
    let tmp = path.with_extension("ckpt.tmp");
    {
        let file = fs::File::create(&tmp)?;
        let width = std::mem::size_of::<T>() as u8;
        let mut w = Writer { w: BufWriter::new(file), width };
        w.bytes(CKPT_MAGIC)?;
        w.bytes(&CKPT_VERSION.to_le_bytes())?;
        w.bytes(&[width])?;
        let meta = serde_json::to_vec(&Meta { gen_cfg: *t.gen.config(), disc_cfg: *t.disc.config(), train_cfg: t.cfg, epoch: t.epoch })?;
        w.u32(meta.len())?;
        w.bytes(&meta)?;
        w.store("gen", &t.gen.params)?;
        w.store("disc", &t.disc.params)?;
        w.adam("gen_opt", &t.gen_opt)?;
        w.adam("disc_opt", &t.disc_opt)?;
        w.u32(t.history.len())?;
        for e in &t.history {
            w.bytes(&(e.epoch as u64).to_le_bytes())?;
            for v in [e.d_loss, e.g_loss, e.g_l1] {
                w.bytes(&v.to_le_bytes())?;
            }
        }
        w.bytes(&t.rng.get_seed())?;
        w.bytes(&t.rng.get_stream().to_le_bytes())?;
        w.bytes(&t.rng.get_word_pos().to_le_bytes())?;
        w.w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    width: u8,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.at < n {
            return Err(Error::Checkpoint(format!("truncated checkpoint: needed {n} bytes at offset {}", self.at)));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("sized slice"))
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.array()?) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn tensor<T: Scalar>(&mut self) -> Result<(String, Tensor<T>)> {
        let len = self.u32()?;
        let name = String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let ndim = self.u32()?;
        if ndim == 0 || ndim > 8 {
            return Err(Error::Checkpoint(format!("tensor {name}: implausible rank {ndim}")));
        }
        let shape = (0..ndim).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).filter(|&n| n <= self.buf.len());
        let n = n.ok_or_else(|| Error::Checkpoint(format!("tensor {name}: shape {shape:?} exceeds file size")))?;
        let raw = self.take(n * self.width as usize)?;
        let data: Vec<T> = if self.width == 4 {
            raw.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)).collect()
        } else {
            raw.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8 bytes")))).collect()
        };
        let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor {name}: {e}")))?;
        Ok((name, t))
    }

    fn store<T: Scalar>(&mut self, prefix: &str) -> Result<ParamStore<T>> {
        let count = self.u32()?;
        let mut s = ParamStore::new();
        for _ in 0..count {
            let (name, t) = self.tensor()?;
            let short = name
                .strip_prefix(prefix)
                .and_then(|n| n.strip_prefix('/'))
                .ok_or_else(|| Error::Checkpoint(format!("expected a '{prefix}/' tensor, found '{name}'")))?;
            s.insert(short, t)?;
        }
        Ok(s)
    }

    fn adam<T: Scalar>(&mut self, cfg: crate::autodiff::AdamConfig) -> Result<Adam<T>> {
        let mut a = Adam::new(cfg);
        a.t = self.u64()?;
        for _ in 0..self.u32()? {
            a.m.push(self.tensor()?.1);
            a.v.push(self.tensor()?.1);
        }
        Ok(a)
    }
}

fn read_header(bytes: &[u8]) -> Result<(Reader<'_>, Meta)> {
    let mut r = Reader { buf: bytes, at: 0, width: 4 };
    let magic = r.take(4)?;
    if magic != CKPT_MAGIC {
        return Err(Error::BadMagic { expected: "CKPT", found: String::from_utf8_lossy(magic).into_owned() });
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    r.width = r.take(1)?[0];
    if r.width != 4 && r.width != 8 {
        return Err(Error::Checkpoint(format!("unsupported element width {}", r.width)));
    }
    let len = r.u32()?;
    let meta: Meta = serde_json::from_slice(r.take(len)?)?;
    Ok((r, meta))
}

/// Restores a full trainer. Loading into a different precision than the
/// file was written with converts values.
pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Trainer<T>> {
    let bytes = fs::read(path)?;
    let (mut r, meta) = read_header(&bytes)?;
    let gen = Generator::from_params(meta.gen_cfg, r.store("gen")?)?;
    let disc = Discriminator::from_params(meta.disc_cfg, r.store("disc")?)?;
    let gen_opt = r.adam(meta.train_cfg.adam)?;
    let disc_opt = r.adam(meta.train_cfg.adam)?;
    let mut history = Vec::new();
    for _ in 0..r.u32()? {
        let epoch = r.u64()? as usize;
        history.push(EpochLoss { epoch, d_loss: r.f64()?, g_loss: r.f64()?, g_l1: r.f64()? });
    }
    let mut rng = ChaCha8Rng::from_seed(r.array()?);
    rng.set_stream(r.u64()?);
    rng.set_word_pos(u128::from_le_bytes(r.array()?));
    if r.at != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after checkpoint", bytes.len() - r.at)));
    }
    Ok(Trainer { gen, disc, gen_opt, disc_opt, cfg: meta.train_cfg, rng, epoch: meta.epoch, history })
}

/// Reads only the generator from a checkpoint.
pub fn load_generator<T: Scalar>(path: impl AsRef<Path>) -> Result<Generator<T>> {
    let bytes = fs::read(path)?;
    let (mut r, meta) = read_header(&bytes)?;
    Generator::from_params(meta.gen_cfg, r.store("gen")?)
}
