use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::save_checkpoint;
use super::config::{DiscriminatorConfig, GeneratorConfig, TrainConfig};
use super::loss::{discriminator_loss_node, generator_loss_nodes};
use super::model::{Discriminator, Generator};
use crate::autodiff::{Adam, Graph, Scalar, Tensor};
use crate::degrade::TrainingPair;
use crate::error::{Error, Result};
use crate::seed::derive_seed;
use crate::volume::VoxelBlock;

pub const LOSS_LOG_NAME: &str = "loss.log";
pub const LATEST_CHECKPOINT: &str = "latest.ckpt";

pub fn epoch_checkpoint_name(epoch: usize) -> String {
    format!("ckpt_epoch{epoch:04}.ckpt")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub d_loss: f64,
    pub g_loss: f64,
    pub g_l1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub d_loss: f64,
    pub g_loss: f64,
    pub g_l1: f64,
}

/// Generator loss and its parameter gradients at a fixed input.
pub struct GeneratorGrads<T: Scalar> {
    pub loss: f64,
    pub l1: f64,
    pub grads: Vec<Tensor<T>>,
}

/// Stacks equally sized blocks into `[N, 1, e, e, e]`.
pub fn batch_tensor<'a, T: Scalar>(blocks: impl IntoIterator<Item = &'a VoxelBlock>, edge: usize) -> Result<Tensor<T>> {
    let mut data = Vec::new();
    let mut n = 0;
    for b in blocks {
        if b.edge != edge {
            return Err(Error::ShapeMismatch(format!("expected blocks of edge {edge}, got {}", b.edge)));
        }
        data.extend(b.data.iter().map(|&v| T::of(v)));
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyInput("empty batch".into()));
    }
    Tensor::new(vec![n, 1, edge, edge, edge], data)
}

/// Uniform(-1, 1) noise of shape `[n, 1, e, e, e]`.
pub fn noise_tensor<T: Scalar>(rng: &mut impl Rng, n: usize, edge: usize) -> Tensor<T> {
    let data = (0..n * edge * edge * edge).map(|_| T::of(rng.random_range(-1.0..1.0))).collect();
    Tensor::new(vec![n, 1, edge, edge, edge], data).expect("noise shape")
}

/// Owns both networks, their optimizers and the training RNG.
#[derive(Debug, Clone)]
pub struct Trainer<T: Scalar> {
    pub gen: Generator<T>,
    pub disc: Discriminator<T>,
    pub gen_opt: Adam<T>,
    pub disc_opt: Adam<T>,
    pub cfg: TrainConfig,
    pub(crate) rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub history: Vec<EpochLoss>,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if gen_cfg.edge != disc_cfg.edge {
            return Err(Error::ConfigInvalid(format!("generator edge {} differs from discriminator edge {}", gen_cfg.edge, disc_cfg.edge)));
        }
        Ok(Trainer {
            gen: Generator::new(gen_cfg, derive_seed(cfg.seed, &[0]))?,
            disc: Discriminator::new(disc_cfg, derive_seed(cfg.seed, &[1]))?,
            gen_opt: Adam::new(cfg.adam),
            disc_opt: Adam::new(cfg.adam),
            cfg,
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[2])),
            epoch: 0,
            history: Vec::new(),
        })
    }

    pub fn edge(&self) -> usize {
        self.gen.config().edge
    }

    fn draw_noise(&mut self, n: usize) -> Option<Tensor<T>> {
        let edge = self.edge();
        self.gen.config().noise.then(|| noise_tensor(&mut self.rng, n, edge))
    }

    /// Gradients of `adv_weight * adversarial + lambda * L1` with respect to
    /// the generator parameters, discriminator held fixed.
    pub fn generator_grads(
        &self,
        cond: &Tensor<T>,
        target: &Tensor<T>,
        noise: Option<&Tensor<T>>,
        lambda: f64,
        adv_weight: f64,
    ) -> Result<GeneratorGrads<T>> {
        let mut g = Graph::new();
        let gen_ids = self.gen.params.bind(&mut g, true);
        let disc_ids = self.disc.params.bind(&mut g, false);
        let y = g.leaf(cond.clone(), false);
        let z = noise.map(|z| g.leaf(z.clone(), false));
        let fake = self.gen.forward(&mut g, &gen_ids, y, z)?;
        let d_fake = self.disc.forward(&mut g, &disc_ids, y, fake)?;
        let (_, l1, total) = generator_loss_nodes(&mut g, d_fake, fake, target.clone(), lambda, adv_weight, self.cfg.generator_loss_mode)?;
        g.backward(total)?;
        let (loss, l1) = (g.scalar(total), g.scalar(l1));
        Ok(GeneratorGrads { loss, l1, grads: self.gen.params.grads(&mut g, &gen_ids) })
    }

    /// Discriminator loss and gradients on a real pair and a given fake.
    pub fn discriminator_grads(&self, cond: &Tensor<T>, real: &Tensor<T>, fake: &Tensor<T>) -> Result<(f64, Vec<Tensor<T>>)> {
        let mut g = Graph::new();
        let ids = self.disc.params.bind(&mut g, true);
        let y = g.leaf(cond.clone(), false);
        let x = g.leaf(real.clone(), false);
        let f = g.leaf(fake.clone(), false);
        let d_real = self.disc.forward(&mut g, &ids, y, x)?;
        let d_fake = self.disc.forward(&mut g, &ids, y, f)?;
        let loss = discriminator_loss_node(&mut g, d_real, d_fake)?;
        g.backward(loss)?;
        Ok((g.scalar(loss), self.disc.params.grads(&mut g, &ids)))
    }

    /// One discriminator update on the real pair and a detached fake, then
    /// one generator update with fresh noise.
    pub fn train_step(&mut self, batch: &[&TrainingPair]) -> Result<StepLoss> {
        let edge = self.edge();
        let cond: Tensor<T> = batch_tensor(batch.iter().map(|p| &p.condition), edge)?;
        let target: Tensor<T> = batch_tensor(batch.iter().map(|p| &p.target), edge)?;
        let n = batch.len();

        let z = self.draw_noise(n);
        let fake = self.gen.run(&cond, z.as_ref())?;
        let (d_loss, d_grads) = self.discriminator_grads(&cond, &target, &fake)?;
        self.disc_opt.step(&mut self.disc.params, &d_grads)?;

        let z = self.draw_noise(n);
        let gg = self.generator_grads(&cond, &target, z.as_ref(), self.cfg.lambda_l1, 1.0)?;
        self.gen_opt.step(&mut self.gen.params, &gg.grads)?;
        Ok(StepLoss { d_loss, g_loss: gg.loss, g_l1: gg.l1 })
    }

    /// Runs one shuffled pass over `pairs` and records the mean losses.
    pub fn train_epoch(&mut self, pairs: &[TrainingPair]) -> Result<EpochLoss> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("no training pairs".into()));
        }
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut self.rng);
        let (mut d, mut g, mut l1, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&TrainingPair> = chunk.iter().map(|&i| &pairs[i]).collect();
            let s = self.train_step(&batch)?;
            if !(s.d_loss.is_finite() && s.g_loss.is_finite()) {
                return Err(Error::Divergence { epoch: self.epoch + 1 });
            }
            d += s.d_loss;
            g += s.g_loss;
            l1 += s.g_l1;
            steps += 1;
        }
        self.epoch += 1;
        let k = steps as f64;
        let e = EpochLoss { epoch: self.epoch, d_loss: d / k, g_loss: g / k, g_l1: l1 / k };
        self.history.push(e);
        Ok(e)
    }

    /// Trains until `cfg.epochs` epochs are complete. With `out_dir`, the
    /// loss log and checkpoints are written there after every epoch.
    pub fn train(&mut self, pairs: &[TrainingPair], out_dir: Option<&Path>, mut on_epoch: impl FnMut(&EpochLoss)) -> Result<()> {
        if pairs.is_empty() {
            return Err(Error::EmptyInput("no training pairs".into()));
        }
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
        }
        while self.epoch < self.cfg.epochs {
            let e = self.train_epoch(pairs)?;
            on_epoch(&e);
            if let Some(dir) = out_dir {
                fs::write(dir.join(LOSS_LOG_NAME), format_loss_log(&self.history))?;
                let every = self.cfg.checkpoint_every;
                if (every > 0 && self.epoch.is_multiple_of(every)) || self.epoch == self.cfg.epochs {
                    save_checkpoint(self, dir.join(epoch_checkpoint_name(self.epoch)))?;
                }
                save_checkpoint(self, dir.join(LATEST_CHECKPOINT))?;
            }
        }
        Ok(())
    }
}

/// `epoch, d_loss, g_loss, g_l1`, one line per epoch.
pub fn format_loss_log(history: &[EpochLoss]) -> String {
    history.iter().map(|e| format!("{}, {:?}, {:?}, {:?}\n", e.epoch, e.d_loss, e.g_loss, e.g_l1)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::PairKey;
    use std::f64::consts::LN_2;

    fn tiny_cfgs(edge: usize) -> (GeneratorConfig, DiscriminatorConfig) {
        (
            GeneratorConfig { base_channels: 2, ..GeneratorConfig::for_edge(edge) },
            DiscriminatorConfig { base_channels: 2, ..DiscriminatorConfig::for_edge(edge) },
        )
    }

    fn pairs(n: usize, edge: usize, seed: u64) -> Vec<TrainingPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let phase = rng.random_range(0.0..6.0);
                let data: Vec<f64> = (0..edge * edge * edge).map(|j| 0.8 * ((j as f64) * 0.37 + phase).sin()).collect();
                let b = VoxelBlock::new(edge, [0; 3], data).unwrap();
                TrainingPair { key: PairKey { volume: 0, transform: 0, block: i }, condition: b.clone(), target: b }
            })
            .collect()
    }

    #[test]
    fn frozen_half_discriminator_gives_ln2() {
        let (gc, dc) = tiny_cfgs(8);
        let cfg = TrainConfig { lambda_l1: 0.0, ..Default::default() };
        let mut t = Trainer::<f64>::new(gc, dc, cfg).unwrap();
        for p in t.disc.params.tensors_mut() {
            p.data_mut().fill(0.0);
        }
        let ps = pairs(4, 8, 1);
        let batch: Vec<&TrainingPair> = ps.iter().collect();
        for _ in 0..3 {
            let s = t.train_step(&batch).unwrap();
            assert!((s.g_loss - LN_2).abs() < 1e-12, "{}", s.g_loss);
            assert!((s.d_loss - 2.0 * LN_2).abs() < 1e-12);
        }
        // The all-zero discriminator is a fixed point of its own update.
        assert!(t.disc.params.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn same_seed_same_losses() {
        let (gc, dc) = tiny_cfgs(8);
        let cfg = TrainConfig { epochs: 2, batch_size: 3, seed: 5, ..Default::default() };
        let ps = pairs(7, 8, 2);
        let run = || {
            let mut t = Trainer::<f32>::new(gc, dc, cfg).unwrap();
            t.train(&ps, None, |_| {}).unwrap();
            (t.history.clone(), t.gen.params.flatten())
        };
        let (a, pa) = run();
        let (b, pb) = run();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        assert_eq!(a.len(), 2);
    }

    fn cosine(a: &[Tensor<f64>], b: &[Tensor<f64>]) -> f64 {
        let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
        for (x, y) in a.iter().zip(b) {
            for (p, q) in x.data().iter().zip(y.data()) {
                ab += p * q;
                aa += p * p;
                bb += q * q;
            }
        }
        ab / (aa.sqrt() * bb.sqrt())
    }

    #[test]
    fn large_lambda_is_dominated_by_l1() {
        let (gc, dc) = tiny_cfgs(8);
        let t = Trainer::<f64>::new(gc, dc, TrainConfig::default()).unwrap();
        let ps = pairs(2, 8, 3);
        let cond: Tensor<f64> = batch_tensor(ps.iter().map(|p| &p.condition), 8).unwrap();
        let target: Tensor<f64> = batch_tensor(ps.iter().map(|p| &p.target), 8).unwrap();
        let z = noise_tensor(&mut ChaCha8Rng::seed_from_u64(4), 2, 8);
        let full = t.generator_grads(&cond, &target, Some(&z), 1e6, 1.0).unwrap();
        let pure = t.generator_grads(&cond, &target, Some(&z), 1.0, 0.0).unwrap();
        assert!(cosine(&full.grads, &pure.grads) > 0.99);
    }

    #[test]
    fn pure_l1_regression_descends() {
        let (gc, dc) = tiny_cfgs(8);
        let cfg = TrainConfig { adam: crate::autodiff::AdamConfig { lr: 1e-3, ..Default::default() }, ..Default::default() };
        let mut t = Trainer::<f32>::new(gc, dc, cfg).unwrap();
        let ps = pairs(10, 8, 6);
        let cond: Tensor<f32> = batch_tensor(ps.iter().map(|p| &p.condition), 8).unwrap();
        let target: Tensor<f32> = batch_tensor(ps.iter().map(|p| &p.target), 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut marks = Vec::new();
        for step in 0..200 {
            let z = noise_tensor(&mut rng, 10, 8);
            let gg = t.generator_grads(&cond, &target, Some(&z), 1.0, 0.0).unwrap();
            if step % 20 == 0 {
                marks.push(gg.l1);
            }
            t.gen_opt.step(&mut t.gen.params, &gg.grads).unwrap();
        }
        let rises = marks.windows(2).filter(|w| w[1] > w[0]).count();
        assert!(rises <= 2, "L1 trace {marks:?}");
        assert!(marks.last().unwrap() < &marks[0]);
    }

    #[test]
    fn rejects_bad_batches() {
        let (gc, dc) = tiny_cfgs(8);
        let mut t = Trainer::<f32>::new(gc, dc, TrainConfig::default()).unwrap();
        let ps = pairs(1, 4, 1);
        assert!(t.train_step(&[&ps[0]]).is_err());
        assert!(t.train(&[], None, |_| {}).is_err());
        let (gc16, _) = tiny_cfgs(16);
        assert!(Trainer::<f32>::new(gc16, dc, TrainConfig::default()).is_err());
    }

    #[test]
    fn loss_log_format() {
        let h = [EpochLoss { epoch: 1, d_loss: 1.5, g_loss: 0.25, g_l1: 0.125 }];
        assert_eq!(format_loss_log(&h), "1, 1.5, 0.25, 0.125\n");
    }
}
