use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 2e-4, beta1: 0.5, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are allocated on first use.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub cfg: AdamConfig,
    /// Number of steps taken so far.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, t: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn step(&mut self, params: &mut ParamStore<T>, grads: &[Tensor<T>]) -> Result<()> {
        if self.m.is_empty() {
            self.m = params.tensors().iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::ShapeMismatch(format!(
                "adam state for {} params, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), (m, v)) in params.tensors().iter().zip(grads).zip(self.m.iter().zip(&self.v)) {
            if p.shape() != g.shape() || p.shape() != m.shape() || p.shape() != v.shape() {
                return Err(Error::ShapeMismatch(format!("adam state shape {:?} vs param {:?}", m.shape(), p.shape())));
            }
        }

        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = T::of(1.0 - beta1.powf(self.t as f64));
        let bc2 = T::of(1.0 - beta2.powf(self.t as f64));
        let (b1, b2, lr, eps) = (T::of(beta1), T::of(beta2), T::of(lr), T::of(eps));
        let one = T::one();
        for ((p, g), (m, v)) in params.tensors_mut().iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::from_f64(&[vals.len()], vals).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = store(&[0.3, -1.2, 4.0]);
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..5 {
            opt.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // Closed form at t = 1: mhat = g, vhat = g^2, so the update is
        // lr * g / (|g| + eps).
        let mut p = store(&[1.0, 1.0, 1.0]);
        let g = [0.37, -2.5, 1e-3];
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut p, &[Tensor::from_f64(&[3], &g).unwrap()]).unwrap();
        for (v, gv) in p.tensors()[0].data().iter().zip(g) {
            let expected = 1.0 - 2e-4 * gv / (gv.abs() + 1e-8);
            assert!((v - expected).abs() < 1e-15);
            assert!(((1.0 - v).abs() - 2e-4).abs() < 1e-8);
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let run = || {
            let mut p = store(&[0.5, -0.5]);
            let mut opt = Adam::new(AdamConfig::default());
            for i in 0..100 {
                let x = i as f64 * 0.1;
                let g = Tensor::from_f64(&[2], &[x.sin(), x.cos()]).unwrap();
                opt.step(&mut p, &[g]).unwrap();
            }
            p
        };
        let (a, b) = (run(), run());
        assert!(a.flatten().iter().zip(b.flatten()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn rejects_mismatched_state() {
        let mut p = store(&[1.0, 2.0]);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
    }
}
