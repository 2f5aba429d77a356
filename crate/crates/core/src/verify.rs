//! Finite-difference verification suite over every graph op and a small
//! end-to-end generator + discriminator objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{grad_check_report, Graph, NodeId, Tensor};
use crate::cgan::{Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, GeneratorLossMode};
use crate::error::Result;

/// Default step for single-op checks.
pub const OP_H: f64 = 1e-5;
/// Default step for the end-to-end model check. Its smallest gradient
/// entries are around 1e-8, so a finer step drowns them in round-off.
pub const MODEL_H: f64 = 1e-2;
pub const OP_THRESHOLD: f64 = 1e-6;
pub const MODEL_THRESHOLD: f64 = 1e-4;
/// Upper bound on scaled thresholds for very coarse steps.
pub const MAX_THRESHOLD: f64 = 5e-2;

/// The stencil's truncation error is O(h^4), so a threshold grows with the
/// fourth power of the step beyond its reference step.
pub fn scaled_threshold(base: f64, h: f64, reference: f64) -> f64 {
    (base * (h / reference).powi(4).max(1.0)).min(MAX_THRESHOLD.max(base))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SuiteOptions {
    pub op_h: f64,
    pub model_h: f64,
    pub seed: u64,
    /// Run with the deliberately broken backward pass.
    pub corrupt: bool,
    pub include_model: bool,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { op_h: OP_H, model_h: MODEL_H, seed: 0, corrupt: false, include_model: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub checked: usize,
    pub skipped: usize,
    pub worst: (f64, f64),
    pub passed: bool,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Magnitudes in `[0.05, 1]` with random sign, away from rectifier kinks.
fn signed_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.05..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>>;

/// Projects `out` onto fixed random weights so the check has a scalar root.
fn project(g: &mut Graph<f64>, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, g.value(out).shape(), -1.0, 1.0);
    g.weighted_sum(out, w)
}

fn op_cases(rng: &mut ChaCha8Rng) -> Vec<(String, Build, Vec<Tensor<f64>>)> {
    let mut cases: Vec<(String, Build, Vec<Tensor<f64>>)> = Vec::new();
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (2, 2, 0)] {
        let inputs =
            vec![uniform(rng, &[2, 2, 5, 6, 4], -1.0, 1.0), uniform(rng, &[3, 2, k, k, k], -0.5, 0.5), uniform(rng, &[3], -0.5, 0.5)];
        cases.push((
            format!("conv3d k{k} s{s} p{p}"),
            Box::new(move |g, x| {
                let y = g.conv3d(x[0], x[1], x[2], s, p)?;
                project(g, y, 11)
            }),
            inputs,
        ));
    }
    for (k, s, p) in [(2, 2, 0), (4, 2, 1), (3, 1, 1), (3, 2, 1)] {
        let inputs =
            vec![uniform(rng, &[2, 3, 3, 4, 2], -1.0, 1.0), uniform(rng, &[3, 2, k, k, k], -0.5, 0.5), uniform(rng, &[2], -0.5, 0.5)];
        cases.push((
            format!("conv_transpose3d k{k} s{s} p{p}"),
            Box::new(move |g, x| {
                let y = g.conv_transpose3d(x[0], x[1], x[2], s, p)?;
                project(g, y, 12)
            }),
            inputs,
        ));
    }
    let shape = [2, 3, 2, 3, 2];
    cases.push((
        "leaky_relu".into(),
        Box::new(|g, x| {
            let y = g.leaky_relu(x[0], 0.2);
            project(g, y, 13)
        }),
        vec![signed_away(rng, &shape)],
    ));
    cases.push((
        "relu".into(),
        Box::new(|g, x| {
            let y = g.relu(x[0]);
            project(g, y, 14)
        }),
        vec![signed_away(rng, &shape)],
    ));
    cases.push((
        "tanh".into(),
        Box::new(|g, x| {
            let y = g.tanh(x[0]);
            project(g, y, 15)
        }),
        vec![uniform(rng, &shape, -2.0, 2.0)],
    ));
    cases.push((
        "atanh_clamped".into(),
        Box::new(|g, x| {
            let y = g.atanh_clamped(x[0], 0.95);
            project(g, y, 20)
        }),
        vec![uniform(rng, &shape, -0.9, 0.9)],
    ));
    cases.push((
        "sigmoid".into(),
        Box::new(|g, x| {
            let y = g.sigmoid(x[0]);
            project(g, y, 16)
        }),
        vec![uniform(rng, &shape, -3.0, 3.0)],
    ));
    cases.push((
        "concat_channels".into(),
        Box::new(|g, x| {
            let y = g.concat_channels(x[0], x[1])?;
            project(g, y, 17)
        }),
        vec![uniform(rng, &[2, 1, 2, 2, 3], -1.0, 1.0), uniform(rng, &[2, 2, 2, 2, 3], -1.0, 1.0)],
    ));
    cases.push((
        "slice_channels".into(),
        Box::new(|g, x| {
            let y = g.slice_channels(x[0], 1, 2)?;
            project(g, y, 18)
        }),
        vec![uniform(rng, &[2, 4, 2, 2, 2], -1.0, 1.0)],
    ));
    cases.push((
        "add + scale".into(),
        Box::new(|g, x| {
            let s = g.scale(x[1], -1.7);
            let y = g.add(x[0], s)?;
            project(g, y, 19)
        }),
        vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &shape, -1.0, 1.0)],
    ));
    cases.push((
        "mean".into(),
        Box::new(|g, x| {
            let t = g.tanh(x[0]);
            Ok(g.mean(t))
        }),
        vec![uniform(rng, &shape, -1.0, 1.0)],
    ));
    let target = uniform(rng, &shape, 0.0, 1.0);
    cases.push(("bce_loss".into(), Box::new(move |g, x| g.bce_loss(x[0], target.clone())), vec![uniform(rng, &shape, 0.05, 0.95)]));
    let base = uniform(rng, &shape, -1.0, 1.0);
    let offsets = signed_away(rng, &shape);
    let target = Tensor::new(shape.to_vec(), base.data().iter().zip(offsets.data()).map(|(b, o)| b - o).collect()).expect("shape");
    cases.push(("l1_loss".into(), Box::new(move |g, x| g.l1_loss(x[0], target.clone())), vec![base]));
    cases
}

/// Generator objective (adversarial through D plus L1) plus the
/// discriminator objective, as one scalar over every parameter and the
/// condition block.
fn model_case(rng: &mut ChaCha8Rng) -> Result<(Build, Vec<Tensor<f64>>)> {
    let edge = 8;
    let gen = Generator::<f64>::new(GeneratorConfig { base_channels: 2, ..GeneratorConfig::for_edge(edge) }, rng.random())?;
    let disc = Discriminator::<f64>::new(DiscriminatorConfig { base_channels: 2, ..DiscriminatorConfig::for_edge(edge) }, rng.random())?;
    let shape = [1, 1, edge, edge, edge];
    let cond = uniform(rng, &shape, -1.0, 1.0);
    let noise = uniform(rng, &shape, -1.0, 1.0);
    let target = uniform(rng, &shape, -1.0, 1.0);
    // Random biases move pre-activations off zero.
    let mut gen = gen;
    let mut disc = disc;
    for store in [&mut gen.params, &mut disc.params] {
        for (name, t) in store.names().to_vec().into_iter().zip(store.tensors_mut()) {
            if name.ends_with(".bias") {
                for v in t.data_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
        }
    }
    let ng = gen.params.len();
    let mut inputs = vec![cond, noise];
    inputs.extend(gen.params.tensors().iter().cloned());
    inputs.extend(disc.params.tensors().iter().cloned());
    let build: Build = Box::new(move |g, x| {
        let (y, z) = (x[0], x[1]);
        let fake = gen.forward(g, &x[2..2 + ng], y, Some(z))?;
        let d_fake = disc.forward(g, &x[2 + ng..], y, fake)?;
        let real = g.leaf(target.clone(), false);
        let d_real = disc.forward(g, &x[2 + ng..], y, real)?;
        let adv = match GeneratorLossMode::NonSaturating {
            GeneratorLossMode::NonSaturating => g.bce_const(d_fake, 1.0),
            GeneratorLossMode::Saturating => unreachable!(),
        };
        let l1 = g.l1_loss(fake, target.clone())?;
        let l1 = g.scale(l1, 10.0);
        let gl = g.add(adv, l1)?;
        let dr = g.bce_const(d_real, 1.0);
        let df = g.bce_const(d_fake, 0.0);
        let dl = g.add(dr, df)?;
        g.add(gl, dl)
    });
    Ok((build, inputs))
}

fn judge(name: String, r: crate::autodiff::GradCheckReport, threshold: f64) -> CheckResult {
    CheckResult {
        name,
        max_rel_err: r.max_rel_err,
        threshold,
        checked: r.checked,
        skipped: r.skipped,
        worst: r.worst,
        passed: r.max_rel_err < threshold && r.checked > 0,
    }
}

pub fn run_suite(opts: &SuiteOptions) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let op_thr = scaled_threshold(OP_THRESHOLD, opts.op_h, OP_H);
    let mut results = Vec::new();
    for (name, build, inputs) in op_cases(&mut rng) {
        let r = grad_check_report(build, &inputs, opts.op_h, opts.corrupt)?;
        results.push(judge(name, r, op_thr));
    }
    if opts.include_model {
        let (build, inputs) = model_case(&mut rng)?;
        let r = grad_check_report(build, &inputs, opts.model_h, opts.corrupt)?;
        let thr = scaled_threshold(MODEL_THRESHOLD, opts.model_h, MODEL_H);
        results.push(judge("generator + discriminator (edge 8)".into(), r, thr));
    }
    Ok(results)
}

pub fn format_results(results: &[CheckResult]) -> String {
    let mut s = format!("{:<36} {:>12} {:>10} {:>8} {:>8}  status\n", "check", "max rel err", "threshold", "checked", "skipped");
    for r in results {
        s.push_str(&format!(
            "{:<36} {:>12.3e} {:>10.1e} {:>8} {:>8}  {}\n",
            r.name,
            r.max_rel_err,
            r.threshold,
            r.checked,
            r.skipped,
            if r.passed { "ok" } else { "FAIL" }
        ));
    }
    s
}
