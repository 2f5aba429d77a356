//! Central finite-difference verification of the backward pass.

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::Result;

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Outcome of one gradient check.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Elements compared.
    pub checked: usize,
    /// Elements whose stencil crossed a kink even at the finest step and were
    /// left out.
    pub skipped: usize,
    /// Analytic and numeric values at the worst element.
    pub worst: (f64, f64),
}

fn evaluate<F>(build: &F, inputs: &[Tensor<f64>]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = build(&mut g, &ids)?;
    Ok((g.scalar(out), g.kink_pattern()))
}

/// Step refinements tried when the stencil crosses a kink.
const REFINE: [f64; 4] = [1.0, 0.25, 0.0625, 0.015625];

/// Fourth-order central differences
/// `(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h` per element. When one of
/// the four points changes the kink pattern of the unperturbed point the
/// step is shrunk; an element still crossing at the finest step is flagged.
fn central_differences<F>(build: &F, inputs: &[Tensor<f64>], h: f64) -> Result<(Vec<Tensor<f64>>, Vec<Vec<bool>>)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let (_, base) = evaluate(build, inputs)?;
    let mut work = inputs.to_vec();
    let mut grads = Vec::with_capacity(inputs.len());
    let mut crossed = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut gi = Tensor::zeros(inputs[i].shape());
        let mut ci = vec![true; inputs[i].len()];
        for j in 0..inputs[i].len() {
            let orig = work[i].data()[j];
            for r in REFINE {
                let hr = h * r;
                let mut f = [0.0; 4];
                let mut cross = false;
                for (slot, step) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                    work[i].data_mut()[j] = orig + step * hr;
                    let (v, k) = evaluate(build, &work)?;
                    *slot = v;
                    cross |= k != base;
                }
                // Differences first so unaffected elements cancel exactly.
                gi.data_mut()[j] = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * hr);
                if !cross {
                    ci[j] = false;
                    break;
                }
            }
            work[i].data_mut()[j] = orig;
        }
        grads.push(gi);
        crossed.push(ci);
    }
    Ok((grads, crossed))
}

/// Fourth-order central differences of the scalar built by `build` with
/// respect to every element of every input.
pub fn numeric_gradient<F>(build: &F, inputs: &[Tensor<f64>], h: f64) -> Result<Vec<Tensor<f64>>>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    Ok(central_differences(build, inputs, h)?.0)
}

/// Maximum relative error between backward-pass and finite-difference
/// gradients over all input elements.
pub fn grad_check<F>(build: F, inputs: &[Tensor<f64>], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    Ok(grad_check_report(build, inputs, h, false)?.max_rel_err)
}

/// As [`grad_check`]; `corrupt` enables the graph's broken-backward hook.
pub fn grad_check_with<F>(build: F, inputs: &[Tensor<f64>], h: f64, corrupt: bool) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    Ok(grad_check_report(build, inputs, h, corrupt)?.max_rel_err)
}

pub fn grad_check_report<F>(build: F, inputs: &[Tensor<f64>], h: f64, corrupt: bool) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut g = Graph::new();
    g.corrupt_backward(corrupt);
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = build(&mut g, &ids)?;
    g.backward(out)?;
    let analytic: Vec<Tensor<f64>> =
        ids.iter().zip(inputs).map(|(&id, t)| g.grad(id).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()))).collect();
    let (numeric, crossed) = central_differences(&build, inputs, h)?;
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, skipped: 0, worst: (0.0, 0.0) };
    for ((a, n), c) in analytic.iter().zip(&numeric).zip(&crossed) {
        for ((&x, &y), &skip) in a.data().iter().zip(n.data()).zip(c) {
            if skip {
                report.skipped += 1;
            } else {
                report.checked += 1;
                let e = relative_error(x, y);
                if e > report.max_rel_err {
                    report.max_rel_err = e;
                    report.worst = (x, y);
                }
            }
        }
    }
    Ok(report)
}
