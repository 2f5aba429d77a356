use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{DiscriminatorConfig, GeneratorConfig};
use crate::autodiff::{Graph, NodeId, ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Upsampling kernel; with stride 2 and no padding it exactly doubles.
const UP_KERNEL: usize = 2;

/// Conditions are clamped to this magnitude before atanh in the residual
/// head; a voxel at exactly -1 still comes back within 1e-3 of -1.
const RESIDUAL_CLAMP: f64 = 1.0 - 1e-3;

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    fan_in: usize,
}

fn conv_params(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize) {
    let fan_in = cin * k * k * k;
    out.push(ParamSpec { name: format!("{name}.weight"), shape: vec![cout, cin, k, k, k], fan_in });
    out.push(ParamSpec { name: format!("{name}.bias"), shape: vec![cout], fan_in });
}

fn conv_t_params(out: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize) {
    let fan_in = cout * k * k * k;
    out.push(ParamSpec { name: format!("{name}.weight"), shape: vec![cin, cout, k, k, k], fan_in });
    out.push(ParamSpec { name: format!("{name}.bias"), shape: vec![cout], fan_in });
}

/// Weights uniform in `+-1/sqrt(fan_in)`, biases zero.
fn init_params<T: Scalar>(specs: Vec<ParamSpec>, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for s in specs {
        let n: usize = s.shape.iter().product();
        let data: Vec<T> = if s.name.ends_with(".bias") {
            vec![T::zero(); n]
        } else {
            let bound = 1.0 / (s.fan_in as f64).sqrt();
            (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()
        };
        store.insert(s.name, Tensor::new(s.shape, data).expect("spec shape")).expect("unique layer names");
    }
    store
}

fn check_layout<T: Scalar>(specs: &[ParamSpec], params: &ParamStore<T>, what: &str) -> Result<()> {
    if specs.len() != params.len() {
        return Err(Error::ShapeMismatch(format!("{what} expects {} tensors, got {}", specs.len(), params.len())));
    }
    for (s, (name, t)) in specs.iter().zip(params.iter()) {
        if s.name != name || s.shape != t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{what} parameter {}: expected {} {:?}, got {name} {:?}",
                s.name,
                s.name,
                s.shape,
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Sequential reader over the node ids of bound parameters.
struct Cursor<'a> {
    ids: &'a [NodeId],
    at: usize,
}

impl Cursor<'_> {
    fn pair(&mut self) -> (NodeId, NodeId) {
        let p = (self.ids[self.at], self.ids[self.at + 1]);
        self.at += 2;
        p
    }
}

/// 3D U-Net mapping a condition block (plus noise) to a block in (-1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Generator<T: Scalar> {
    cfg: GeneratorConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Generator<T> {
    fn layout(cfg: &GeneratorConfig) -> Vec<ParamSpec> {
        let (d, k, base) = (cfg.depth, cfg.kernel, cfg.base_channels);
        let ch = |i: usize| base << i;
        let mut specs = Vec::new();
        conv_params(&mut specs, "stem", cfg.in_channels, base, k);
        for i in 0..d {
            let cin = if i == 0 { base } else { ch(i - 1) };
            conv_params(&mut specs, &format!("enc{i}"), cin, ch(i), k);
        }
        conv_params(&mut specs, "mid", ch(d - 1), ch(d - 1), k);
        for i in (0..d).rev() {
            let cin = if i == d - 1 { ch(d - 1) } else { 2 * ch(i) };
            let cout = if i == 0 { base } else { ch(i - 1) };
            conv_t_params(&mut specs, &format!("dec{i}"), cin, cout, UP_KERNEL);
        }
        conv_params(&mut specs, "out", 2 * base + cfg.in_channels, 1, k);
        specs
    }

    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Generator { cfg, params: init_params(Self::layout(&cfg), seed) })
    }

    pub fn from_params(cfg: GeneratorConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        check_layout(&Self::layout(&cfg), &params, "generator")?;
        Ok(Generator { cfg, params })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Builds the forward pass on `g`. `ids` are this model's parameters
    /// bound with [`ParamStore::bind`]; `noise` is required iff the config
    /// uses a noise channel.
    pub fn forward(&self, g: &mut Graph<T>, ids: &[NodeId], cond: NodeId, noise: Option<NodeId>) -> Result<NodeId> {
        let c = &self.cfg;
        let e = c.edge;
        let shape = g.value(cond).shape().to_vec();
        if shape.len() != 5 || shape[1] != 1 || shape[2..] != [e, e, e] {
            return Err(Error::ShapeMismatch(format!("generator expects [N, 1, {e}, {e}, {e}] conditions, got {shape:?}")));
        }
        let x0 = match (c.noise, noise) {
            (true, Some(z)) => g.concat_channels(cond, z)?,
            (false, None) => cond,
            _ => return Err(Error::ShapeMismatch("noise input does not match the generator's noise setting".into())),
        };
        let (pad, slope) = (c.kernel / 2, c.slope);
        let mut cur = Cursor { ids, at: 0 };
        // Full-resolution features, so the head is not limited to a linear
        // read of the raw input at the finest scale.
        let (w, b) = cur.pair();
        let y = g.conv3d(x0, w, b, 1, pad)?;
        let mut h = g.leaky_relu(y, slope);
        let mut skips = vec![h];
        for _ in 0..c.depth {
            let (w, b) = cur.pair();
            let y = g.conv3d(h, w, b, 2, pad)?;
            h = g.leaky_relu(y, slope);
            skips.push(h);
        }
        let (w, b) = cur.pair();
        let y = g.conv3d(h, w, b, 1, pad)?;
        h = g.leaky_relu(y, slope);
        for i in (0..c.depth).rev() {
            let (w, b) = cur.pair();
            let y = g.conv_transpose3d(h, w, b, 2, 0)?;
            let y = g.relu(y);
            h = g.concat_channels(y, skips[i])?;
        }
        let h = g.concat_channels(h, x0)?;
        let (w, b) = cur.pair();
        let mut y = g.conv3d(h, w, b, 1, pad)?;
        if c.residual {
            let pre = g.atanh_clamped(cond, RESIDUAL_CLAMP);
            y = g.add(y, pre)?;
        }
        Ok(g.tanh(y))
    }

    /// Forward pass without gradient tracking.
    pub fn run(&self, cond: &Tensor<T>, noise: Option<&Tensor<T>>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let ids = self.params.bind(&mut g, false);
        let c = g.leaf(cond.clone(), false);
        let z = noise.map(|z| g.leaf(z.clone(), false));
        let out = self.forward(&mut g, &ids, c, z)?;
        Ok(g.value(out).clone())
    }
}

/// Patch discriminator over channel-concatenated (condition, candidate).
#[derive(Debug, Clone, PartialEq)]
pub struct Discriminator<T: Scalar> {
    cfg: DiscriminatorConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Discriminator<T> {
    fn layout(cfg: &DiscriminatorConfig) -> Vec<ParamSpec> {
        let ch = |i: usize| cfg.base_channels << i;
        let mut specs = Vec::new();
        for i in 0..cfg.layers {
            let cin = if i == 0 { cfg.in_channels } else { ch(i - 1) };
            conv_params(&mut specs, &format!("conv{i}"), cin, ch(i), cfg.kernel);
        }
        conv_params(&mut specs, "head", ch(cfg.layers - 1), 1, cfg.kernel);
        specs
    }

    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        Ok(Discriminator { cfg, params: init_params(Self::layout(&cfg), seed) })
    }

    pub fn from_params(cfg: DiscriminatorConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        check_layout(&Self::layout(&cfg), &params, "discriminator")?;
        Ok(Discriminator { cfg, params })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    /// Patch probabilities `[N, 1, p, p, p]`.
    pub fn forward(&self, g: &mut Graph<T>, ids: &[NodeId], cond: NodeId, candidate: NodeId) -> Result<NodeId> {
        let c = &self.cfg;
        let e = c.edge;
        for id in [cond, candidate] {
            let s = g.value(id).shape();
            if s.len() != 5 || s[1] != 1 || s[2..] != [e, e, e] {
                return Err(Error::ShapeMismatch(format!("discriminator expects [N, 1, {e}, {e}, {e}] inputs, got {s:?}")));
            }
        }
        let pad = c.kernel / 2;
        let mut cur = Cursor { ids, at: 0 };
        let mut h = g.concat_channels(cond, candidate)?;
        for _ in 0..c.layers {
            let (w, b) = cur.pair();
            let y = g.conv3d(h, w, b, 2, pad)?;
            h = g.leaky_relu(y, c.slope);
        }
        let (w, b) = cur.pair();
        let y = g.conv3d(h, w, b, 1, pad)?;
        Ok(g.sigmoid(y))
    }

    pub fn run(&self, cond: &Tensor<T>, candidate: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let ids = self.params.bind(&mut g, false);
        let c = g.leaf(cond.clone(), false);
        let x = g.leaf(candidate.clone(), false);
        let out = self.forward(&mut g, &ids, c, x)?;
        Ok(g.value(out).clone())
    }
}
