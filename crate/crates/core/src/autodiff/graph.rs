//! Tape-based reverse-mode autodiff.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and the backward pass is a single reverse sweep.

use super::conv;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Log-argument clamp used by the binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Conv3d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    ConvT3d { x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize },
    LeakyRelu { x: NodeId, slope: f64 },
    Relu { x: NodeId },
    Tanh { x: NodeId },
    Atanh { x: NodeId, limit: f64 },
    Sigmoid { x: NodeId },
    Concat { a: NodeId, b: NodeId },
    Slice { x: NodeId, start: usize },
    Add { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: f64 },
    Mean { x: NodeId },
    WeightedSum { x: NodeId, w: Tensor<T> },
    Bce { p: NodeId, target: Tensor<T> },
    L1 { a: NodeId, target: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    grad: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    corrupt_backward: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Graph::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), corrupt_backward: false }
    }

    /// Test hook: makes the leaky-ReLU backward use a wrong negative slope so
    /// that verification harnesses can be shown to catch a broken gradient.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, on: bool) {
        self.corrupt_backward = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant copy of `id`'s value, cut from the graph.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.leaf(v, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.nodes[id.0].grad.as_ref()
    }

    pub fn take_grad(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.nodes[id.0].grad.take()
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id).data()[0].f64()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { value, grad: None, op, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let out = conv::conv3d_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::Conv3d { x, w, b, stride, pad }, rg))
    }

    /// Transposed convolution; `w` is `[cin, cout, k, k, k]`.
    pub fn conv_transpose3d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let out = conv::conv_t_forward(self.value(x), self.value(w), self.value(b), stride, pad)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(out, Op::ConvT3d { x, w, b, stride, pad }, rg))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let s = T::of(slope);
        let out = self.value(x).map(|v| if v > T::zero() { v } else { v * s });
        let rg = self.rg(&[x]);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(|v| v.tanh());
        let rg = self.rg(&[x]);
        self.push(out, Op::Tanh { x }, rg)
    }

    /// `atanh(clamp(x, -limit, limit))`, flat where the clamp is active.
    pub fn atanh_clamped(&mut self, x: NodeId, limit: f64) -> NodeId {
        let l = T::of(limit);
        let out = self.value(x).map(|v| v.max(-l).min(l).atanh());
        let rg = self.rg(&[x]);
        self.push(out, Op::Atanh { x, limit }, rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid { x }, rg)
    }

    /// Stacks `a` and `b` along axis 1.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(Error::ShapeMismatch(format!("cannot concat channels of {sa:?} and {sb:?}")));
        }
        let (n, ca, cb) = (sa[0], sa[1], sb[1]);
        let plane: usize = sa[2..].iter().product();
        let mut shape = sa.to_vec();
        shape[1] = ca + cb;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&va[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&vb[i * cb * plane..(i + 1) * cb * plane]);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat { a, b }, rg))
    }

    /// Channels `start..start + len` of `x`.
    pub fn slice_channels(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let sx = self.value(x).shape();
        if sx.len() < 2 || len == 0 || start + len > sx[1] {
            return Err(Error::ShapeMismatch(format!("channel slice {start}..{} out of {sx:?}", start + len)));
        }
        let (n, c) = (sx[0], sx[1]);
        let plane: usize = sx[2..].iter().product();
        let mut shape = sx.to_vec();
        shape[1] = len;
        let vx = self.value(x).data();
        let mut data = Vec::with_capacity(n * len * plane);
        for i in 0..n {
            data.extend_from_slice(&vx[(i * c + start) * plane..(i * c + start + len) * plane]);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(shape, data)?, Op::Slice { x, start }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::ShapeMismatch(format!("add {:?} + {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add { a, b }, rg))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let cs = T::of(c);
        let out = self.value(x).map(|v| v * cs);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, c }, rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let m = v.sum() / T::of(v.len() as f64);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(m), Op::Mean { x }, rg)
    }

    /// `sum(x * w)` for a constant `w`; used to project outputs onto a
    /// random direction when checking gradients.
    pub fn weighted_sum(&mut self, x: NodeId, w: Tensor<T>) -> Result<NodeId> {
        if self.value(x).shape() != w.shape() {
            return Err(Error::ShapeMismatch(format!("weighted_sum {:?} vs {:?}", self.value(x).shape(), w.shape())));
        }
        let s: T = self.value(x).data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, w }, rg))
    }

    /// Mean binary cross-entropy `-[t ln p + (1-t) ln(1-p)]`, with `p`
    /// clamped to `[eps, 1 - eps]`.
    pub fn bce_loss(&mut self, p: NodeId, target: Tensor<T>) -> Result<NodeId> {
        if self.value(p).shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!("bce {:?} vs target {:?}", self.value(p).shape(), target.shape())));
        }
        let eps = T::of(BCE_EPS);
        let one = T::one();
        let total: T = self
            .value(p)
            .data()
            .iter()
            .zip(target.data())
            .map(|(&pv, &t)| {
                let q = pv.max(eps).min(one - eps);
                -(t * q.ln() + (one - t) * (one - q).ln())
            })
            .sum();
        let loss = total / T::of(target.len() as f64);
        let rg = self.rg(&[p]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, target }, rg))
    }

    /// Convenience: BCE against a constant label.
    pub fn bce_const(&mut self, p: NodeId, label: f64) -> NodeId {
        let t = Tensor::full(self.value(p).shape(), T::of(label));
        self.bce_loss(p, t).expect("target built from p's shape")
    }

    /// Mean absolute difference against a constant target.
    pub fn l1_loss(&mut self, a: NodeId, target: Tensor<T>) -> Result<NodeId> {
        if self.value(a).shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!("l1 {:?} vs target {:?}", self.value(a).shape(), target.shape())));
        }
        let total: T = self.value(a).data().iter().zip(target.data()).map(|(&x, &t)| (x - t).abs()).sum();
        let loss = total / T::of(target.len() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(loss), Op::L1 { a, target }, rg))
    }

    /// Side of every non-differentiable point the current values sit on:
    /// rectifier inputs, L1 residuals and BCE/atanh clamp bounds. Finite-difference
    /// checks compare patterns to detect steps that straddle a kink.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let eps = T::of(BCE_EPS);
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::LeakyRelu { x, .. } | Op::Relu { x } => {
                    out.extend(self.value(*x).data().iter().map(|&v| v > T::zero()));
                }
                Op::L1 { a, target } => {
                    out.extend(self.value(*a).data().iter().zip(target.data()).map(|(&v, &t)| v > t));
                }
                &Op::Atanh { x, limit } => {
                    let l = T::of(limit);
                    for &v in self.value(x).data() {
                        out.push(v < -l);
                        out.push(v > l);
                    }
                }
                Op::Bce { p, .. } => {
                    for &v in self.value(*p).data() {
                        out.push(v < eps);
                        out.push(v > T::one() - eps);
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// Reverse sweep from the one-element node `root` (seeded with 1).
    /// Clears gradients from any previous sweep.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::ShapeMismatch(format!("backward root must be scalar, got {:?}", self.value(root).shape())));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[root.0].grad = Some(Tensor::full(self.value(root).shape(), T::one()));

        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contributions = self.local_grads(i, &g)?;
            self.nodes[i].grad = Some(g);
            for (id, dg) in contributions {
                let node = &mut self.nodes[id.0];
                match node.grad.as_mut() {
                    Some(acc) => acc.add_assign(&dg),
                    None => node.grad = Some(dg),
                }
            }
        }
        Ok(())
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv3d { x, w, b, stride, pad } => {
                let need = [self.needs(x), self.needs(w), self.needs(b)];
                let grads = conv::conv3d_backward(self.value(x), self.value(w), self.value(b), stride, pad, g, need)?;
                out.extend([x, w, b].into_iter().zip(grads).filter_map(|(id, t)| t.map(|t| (id, t))));
            }
            &Op::ConvT3d { x, w, b, stride, pad } => {
                let need = [self.needs(x), self.needs(w), self.needs(b)];
                let grads = conv::conv_t_backward(self.value(x), self.value(w), self.value(b), stride, pad, g, need)?;
                out.extend([x, w, b].into_iter().zip(grads).filter_map(|(id, t)| t.map(|t| (id, t))));
            }
            &Op::LeakyRelu { x, slope } => {
                let slope = if self.corrupt_backward { slope * 1.5 } else { slope };
                let s = T::of(slope);
                out.push((x, zip_map(self.value(x), g, |xv, gv| if xv > T::zero() { gv } else { gv * s })));
            }
            &Op::Relu { x } => {
                out.push((x, zip_map(self.value(x), g, |xv, gv| if xv > T::zero() { gv } else { T::zero() })));
            }
            &Op::Tanh { x } => {
                out.push((x, zip_map(&node.value, g, |y, gv| gv * (T::one() - y * y))));
            }
            &Op::Atanh { x, limit } => {
                let l = T::of(limit);
                let one = T::one();
                out.push((x, zip_map(self.value(x), g, |xv, gv| if xv.abs() < l { gv / (one - xv * xv) } else { T::zero() })));
            }
            &Op::Sigmoid { x } => {
                out.push((x, zip_map(&node.value, g, |y, gv| gv * y * (T::one() - y))));
            }
            &Op::Concat { a, b } => {
                let ca = self.value(a).shape()[1];
                let cb = self.value(b).shape()[1];
                let n = g.shape()[0];
                let plane: usize = g.shape()[2..].iter().product();
                let (mut ga, mut gb) = (Vec::with_capacity(n * ca * plane), Vec::with_capacity(n * cb * plane));
                for sample in g.data().chunks((ca + cb) * plane) {
                    ga.extend_from_slice(&sample[..ca * plane]);
                    gb.extend_from_slice(&sample[ca * plane..]);
                }
                if self.needs(a) {
                    out.push((a, Tensor::new(self.value(a).shape().to_vec(), ga)?));
                }
                if self.needs(b) {
                    out.push((b, Tensor::new(self.value(b).shape().to_vec(), gb)?));
                }
            }
            &Op::Slice { x, start } => {
                let sx = self.value(x).shape();
                let (c, len) = (sx[1], g.shape()[1]);
                let plane: usize = sx[2..].iter().product();
                let mut gx = Tensor::zeros(sx);
                for (i, chunk) in g.data().chunks(len * plane).enumerate() {
                    let off = (i * c + start) * plane;
                    gx.data_mut()[off..off + len * plane].copy_from_slice(chunk);
                }
                out.push((x, gx));
            }
            &Op::Add { a, b } => {
                if self.needs(a) {
                    out.push((a, g.clone()));
                }
                if self.needs(b) {
                    out.push((b, g.clone()));
                }
            }
            &Op::Scale { x, c } => {
                let cs = T::of(c);
                out.push((x, g.map(|v| v * cs)));
            }
            &Op::Mean { x } => {
                let n = T::of(self.value(x).len() as f64);
                out.push((x, Tensor::full(self.value(x).shape(), g.data()[0] / n)));
            }
            Op::WeightedSum { x, w } => {
                let g0 = g.data()[0];
                out.push((*x, w.map(|v| v * g0)));
            }
            Op::Bce { p, target } => {
                let eps = T::of(BCE_EPS);
                let one = T::one();
                let scale = g.data()[0] / T::of(target.len() as f64);
                let data = self
                    .value(*p)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&pv, &t)| {
                        // Clamped region has zero derivative.
                        if pv < eps || pv > one - eps {
                            T::zero()
                        } else {
                            scale * (-t / pv + (one - t) / (one - pv))
                        }
                    })
                    .collect();
                out.push((*p, Tensor::new(self.value(*p).shape().to_vec(), data)?));
            }
            Op::L1 { a, target } => {
                let scale = g.data()[0] / T::of(target.len() as f64);
                let data = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(target.data())
                    .map(|(&x, &t)| {
                        let d = x - t;
                        if d > T::zero() {
                            scale
                        } else if d < T::zero() {
                            -scale
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((*a, Tensor::new(self.value(*a).shape().to_vec(), data)?));
            }
        }
        out.retain(|(id, _)| self.needs(*id));
        Ok(out)
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, g: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(g.data()).map(|(&x, &gv)| f(x, gv)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape as forward value")
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
