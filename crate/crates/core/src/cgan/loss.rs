use super::config::GeneratorLossMode;
use crate::autodiff::{Graph, NodeId, Scalar, Tensor, BCE_EPS};
use crate::error::Result;

fn clamp_p(p: f64) -> f64 {
    p.clamp(BCE_EPS, 1.0 - BCE_EPS)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

/// `-mean ln D(real) - mean ln(1 - D(fake))`.
pub fn discriminator_loss(d_real: &[f64], d_fake: &[f64]) -> f64 {
    -mean(d_real.iter().map(|&p| clamp_p(p).ln())) - mean(d_fake.iter().map(|&p| (1.0 - clamp_p(p)).ln()))
}

/// Adversarial term per `mode` plus `lambda * mean |g - t|`.
pub fn generator_loss(d_fake: &[f64], g_out: &[f64], target: &[f64], lambda: f64, mode: GeneratorLossMode) -> f64 {
    let adv = match mode {
        GeneratorLossMode::Saturating => mean(d_fake.iter().map(|&p| (1.0 - clamp_p(p)).ln())),
        GeneratorLossMode::NonSaturating => -mean(d_fake.iter().map(|&p| clamp_p(p).ln())),
    };
    adv + lambda * mean(g_out.iter().zip(target).map(|(g, t)| (g - t).abs()))
}

pub(crate) fn discriminator_loss_node<T: Scalar>(g: &mut Graph<T>, d_real: NodeId, d_fake: NodeId) -> Result<NodeId> {
    let real = g.bce_const(d_real, 1.0);
    let fake = g.bce_const(d_fake, 0.0);
    g.add(real, fake)
}

/// Returns the adversarial term node (scaled by `adv_weight`), the L1 node
/// and their weighted total.
pub(crate) fn generator_loss_nodes<T: Scalar>(
    g: &mut Graph<T>,
    d_fake: NodeId,
    fake: NodeId,
    target: Tensor<T>,
    lambda: f64,
    adv_weight: f64,
    mode: GeneratorLossMode,
) -> Result<(NodeId, NodeId, NodeId)> {
    let adv = match mode {
        GeneratorLossMode::NonSaturating => g.bce_const(d_fake, 1.0),
        GeneratorLossMode::Saturating => {
            let b = g.bce_const(d_fake, 0.0);
            g.scale(b, -1.0)
        }
    };
    let adv = g.scale(adv, adv_weight);
    let l1 = g.l1_loss(fake, target)?;
    let weighted = g.scale(l1, lambda);
    let total = g.add(adv, weighted)?;
    Ok((adv, l1, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn discriminator_examples() {
        let eps = 1e-9;
        assert!(discriminator_loss(&[1.0 - eps], &[eps]) < 1e-6);
        assert!((discriminator_loss(&[0.5; 4], &[0.5; 4]) - 2.0 * LN_2).abs() < 1e-12);
        assert!((discriminator_loss(&[0.9], &[0.1]) - 0.21072103131565253).abs() < 1e-12);
    }

    #[test]
    fn generator_examples() {
        let g = [0.2, -0.4];
        assert!((generator_loss(&[0.5], &g, &g, 7.0, GeneratorLossMode::NonSaturating) - LN_2).abs() < 1e-12);
        let t = [0.21, -0.41];
        let v = generator_loss(&[0.5], &g, &t, 100.0, GeneratorLossMode::NonSaturating);
        assert!((v - (LN_2 + 1.0)).abs() < 1e-9);
        assert!((generator_loss(&[0.5], &g, &g, 1.0, GeneratorLossMode::Saturating) + LN_2).abs() < 1e-12);
    }

    #[test]
    fn graph_losses_match_plain_functions() {
        let mut gr = Graph::<f64>::new();
        let real = Tensor::from_f64(&[1, 1, 2, 1, 1], &[0.9, 0.7]).unwrap();
        let fake = Tensor::from_f64(&[1, 1, 2, 1, 1], &[0.2, 0.4]).unwrap();
        let r = gr.leaf(real.clone(), false);
        let f = gr.leaf(fake.clone(), false);
        let d = discriminator_loss_node(&mut gr, r, f).unwrap();
        assert!((gr.scalar(d) - discriminator_loss(real.data(), fake.data())).abs() < 1e-12);

        let out = Tensor::from_f64(&[1, 1, 2, 1, 1], &[0.1, -0.3]).unwrap();
        let tgt = Tensor::from_f64(&[1, 1, 2, 1, 1], &[0.0, 0.5]).unwrap();
        let o = gr.leaf(out.clone(), false);
        for mode in [GeneratorLossMode::Saturating, GeneratorLossMode::NonSaturating] {
            let (_, _, total) = generator_loss_nodes(&mut gr, f, o, tgt.clone(), 3.0, 1.0, mode).unwrap();
            let want = generator_loss(fake.data(), out.data(), tgt.data(), 3.0, mode);
            assert!((gr.scalar(total) - want).abs() < 1e-12);
        }
    }
}
