//! Training losses: pixel reconstruction, naturalness under the frozen
//! discriminator, and the relativistic average GAN pair.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{NodeId, Tape};
use crate::nmd::{NmdNet, PRED_CLAMP};

/// Weights for the three loss components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights::frsr()
    }
}

impl LossWeights {
    /// Distortion-oriented preset: reconstruction only.
    pub fn frsr() -> LossWeights {
        LossWeights { lambda1: 1.0, lambda2: 0.0, lambda3: 0.0 }
    }

    /// Perception-oriented preset.
    pub fn natsr() -> LossWeights {
        LossWeights { lambda1: 1.0, lambda2: 1e-3, lambda3: 1e-3 }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{} must be finite and non-negative, got {}", name, v)));
            }
        }
        Ok(())
    }
}

/// Mean absolute error between two equal-shape nodes.
pub fn recon_loss(tape: &mut Tape, sr: NodeId, hr: NodeId) -> Result<NodeId> {
    let diff = tape.sub(sr, hr)?;
    let mag = tape.abs(diff);
    Ok(tape.mean_all(mag))
}

/// Mean negative log naturalness score of a batch. The discriminator's
/// parameters enter as frozen leaves, so gradients reach only `sr`.
pub fn natural_loss(tape: &mut Tape, nmd: &NmdNet, sr: NodeId) -> Result<NodeId> {
    let scores = nmd.forward(tape, sr)?;
    let clamped = tape.clamp(scores, PRED_CLAMP, 1.0);
    let logs = tape.ln(clamped);
    let mean = tape.mean_all(logs);
    Ok(tape.scale(mean, -1.0))
}

/// Relativistic average losses over two batches of logits. The average
/// enters each sigmoid as a graph node, so gradients flow through both
/// batches in both losses.
pub fn ragan_losses(tape: &mut Tape, c_real: NodeId, c_fake: NodeId) -> Result<(NodeId, NodeId)> {
    let nr = tape.value(c_real).numel();
    let nf = tape.value(c_fake).numel();
    if nr == 0 || nf == 0 {
        return Err(Error::invalid("ragan_losses: empty logit batch"));
    }
    if nr != nf {
        return Err(Error::shape("ragan_losses", format!("real batch {} vs fake batch {}", nr, nf)));
    }
    let mean_fake = tape.mean_all(c_fake);
    let mean_real = tape.mean_all(c_real);
    let rel_real = tape.sub_scalar(c_real, mean_fake)?;
    let rel_fake = tape.sub_scalar(c_fake, mean_real)?;
    let d_real = tape.sigmoid(rel_real);
    let d_fake = tape.sigmoid(rel_fake);
    let ln_d_real = log_of(tape, d_real);
    let ln_d_fake = log_of(tape, d_fake);
    let ln_one_minus_real = log_of_complement(tape, d_real);
    let ln_one_minus_fake = log_of_complement(tape, d_fake);
    let g = {
        let a = tape.mean_all(ln_d_real);
        let b = tape.mean_all(ln_one_minus_fake);
        let sum = tape.add(a, b)?;
        tape.scale(sum, -1.0)
    };
    let d = {
        let a = tape.mean_all(ln_d_fake);
        let b = tape.mean_all(ln_one_minus_real);
        let sum = tape.add(a, b)?;
        tape.scale(sum, -1.0)
    };
    Ok((g, d))
}

fn log_of(tape: &mut Tape, p: NodeId) -> NodeId {
    let c = tape.clamp(p, PRED_CLAMP, 1.0 - PRED_CLAMP);
    tape.ln(c)
}

fn log_of_complement(tape: &mut Tape, p: NodeId) -> NodeId {
    let neg = tape.scale(p, -1.0);
    let one_minus = tape.add_const(neg, 1.0);
    let c = tape.clamp(one_minus, PRED_CLAMP, 1.0 - PRED_CLAMP);
    tape.ln(c)
}

/// Weighted sum of the three components.
pub fn total_loss(
    tape: &mut Tape,
    recon: NodeId,
    natural: NodeId,
    adv_g: NodeId,
    w: &LossWeights,
) -> Result<NodeId> {
    let a = tape.scale(recon, w.lambda1);
    let b = tape.scale(natural, w.lambda2);
    let c = tape.scale(adv_g, w.lambda3);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nmd::NmdConfig;
    use crate::tensor::{Image, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar(tape: &Tape, id: NodeId) -> f64 {
        tape.value(id).item()
    }

    #[test]
    fn recon_is_mean_absolute_error() {
        let mut tape = Tape::new(1);
        let a = tape.var(Tensor::from_vec(&[1, 2, 2, 1], vec![0.1, 0.4, 0.6, 0.9]).unwrap());
        let same = tape.var(Tensor::from_vec(&[1, 2, 2, 1], vec![0.1, 0.4, 0.6, 0.9]).unwrap());
        let zero = recon_loss(&mut tape, a, same).unwrap();
        assert_eq!(scalar(&tape, zero), 0.0);
        let shifted = tape.var(Tensor::from_vec(&[1, 2, 2, 1], vec![0.2, 0.5, 0.7, 1.0]).unwrap());
        let l = recon_loss(&mut tape, shifted, a).unwrap();
        assert!((scalar(&tape, l) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn recon_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..60).map(|_| rng.gen()).collect();
        let ys: Vec<f64> = (0..60).map(|_| rng.gen()).collect();
        let direct = xs.iter().zip(&ys).map(|(x, y)| (x - y).abs()).sum::<f64>() / 60.0;
        let mut tape = Tape::new(1);
        let a = tape.var(Tensor::from_vec(&[2, 5, 6, 1], xs).unwrap());
        let b = tape.var(Tensor::from_vec(&[2, 5, 6, 1], ys).unwrap());
        let l = recon_loss(&mut tape, a, b).unwrap();
        assert!((scalar(&tape, l) - direct).abs() < 1e-12);
        let c = tape.var(Tensor::zeros(&[1, 5, 6, 1]));
        assert!(recon_loss(&mut tape, a, c).is_err());
    }

    #[test]
    fn natural_loss_tracks_scores_and_freezes_the_scorer() {
        let mut nmd = NmdNet::init(NmdConfig { widths: vec![4, 8], patch: 16 }, 2).unwrap();
        // Zero head: every score is exactly 0.5, so the loss is ln 2.
        nmd.params.set_value("head.conv", Tensor::zeros(&[1, 1, 8, 1])).unwrap();
        nmd.params.freeze();
        let mut tape = Tape::new(1);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<Image> = crate::data::toy_images(2, 16, 16, &mut rng);
        let x = tape.var(Image::batch(&imgs).unwrap());
        let l = natural_loss(&mut tape, &nmd, x).unwrap();
        assert!((scalar(&tape, l) - std::f64::consts::LN_2).abs() < 1e-12);
        let grads = tape.backward(l).unwrap();
        let named = tape.param_grads(&grads);
        assert!(named.is_empty(), "frozen scorer must produce no parameter gradients");
    }

    #[test]
    fn natural_loss_is_zero_at_full_score() {
        // Saturate the head bias so sigmoid rounds to 1.0.
        let mut nmd = NmdNet::init(NmdConfig { widths: vec![4], patch: 8 }, 4).unwrap();
        nmd.params.set_value("head.conv", Tensor::zeros(&[1, 1, 4, 1])).unwrap();
        nmd.params.set_value("head.bias", Tensor::from_vec(&[1], vec![60.0]).unwrap()).unwrap();
        let mut tape = Tape::new(1);
        let x = tape.var(Tensor::filled(&[1, 8, 8, 3], 0.5));
        let l = natural_loss(&mut tape, &nmd, x).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
    }

    fn ragan_values(real: &[f64], fake: &[f64]) -> (f64, f64) {
        let mut tape = Tape::new(1);
        let r = tape.var(Tensor::from_vec(&[real.len(), 1, 1, 1], real.to_vec()).unwrap());
        let f = tape.var(Tensor::from_vec(&[fake.len(), 1, 1, 1], fake.to_vec()).unwrap());
        let (g, d) = ragan_losses(&mut tape, r, f).unwrap();
        (scalar(&tape, g), scalar(&tape, d))
    }

    #[test]
    fn equal_logits_give_twice_ln_two() {
        let (g, d) = ragan_values(&[0.3, 0.3], &[0.3, 0.3]);
        let expected = 2.0 * std::f64::consts::LN_2;
        assert!((g - expected).abs() < 1e-12);
        assert!((d - expected).abs() < 1e-12);
    }

    #[test]
    fn saturated_generator_loss_sits_at_the_clamp_floor() {
        let (g, _) = ragan_values(&[80.0, 80.0], &[-80.0, -80.0]);
        assert!(g >= 0.0 && g < 3e-7, "{}", g);
    }

    #[test]
    fn two_sample_batch_matches_hand_evaluation() {
        let (g, d) = ragan_values(&[1.0, 0.0], &[0.0, -1.0]);
        let sigmoid = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mean_r = 0.5;
        let mean_f = -0.5;
        let d_real = [sigmoid(1.0 - mean_f), sigmoid(0.0 - mean_f)];
        let d_fake = [sigmoid(0.0 - mean_r), sigmoid(-1.0 - mean_r)];
        let mean = |v: [f64; 2]| (v[0] + v[1]) / 2.0;
        let g_hand = -mean([d_real[0].ln(), d_real[1].ln()])
            - mean([(1.0 - d_fake[0]).ln(), (1.0 - d_fake[1]).ln()]);
        let d_hand = -mean([d_fake[0].ln(), d_fake[1].ln()])
            - mean([(1.0 - d_real[0]).ln(), (1.0 - d_real[1]).ln()]);
        assert!((g - g_hand).abs() < 1e-12, "{} vs {}", g, g_hand);
        assert!((d - d_hand).abs() < 1e-12, "{} vs {}", d, d_hand);
    }

    #[test]
    fn swapping_real_and_fake_swaps_the_losses() {
        let real = [1.4, -0.3, 0.8];
        let fake = [0.2, -1.0, 0.5];
        let (g, d) = ragan_values(&real, &fake);
        let (g2, d2) = ragan_values(&fake, &real);
        assert_eq!(g.to_bits(), d2.to_bits());
        assert_eq!(d.to_bits(), g2.to_bits());
    }

    #[test]
    fn ragan_is_shift_invariant() {
        let real = [0.9, 0.1, -0.4];
        let fake = [0.3, -0.8, 0.2];
        let (g, d) = ragan_values(&real, &fake);
        let shift = 5.5;
        let real_s: Vec<f64> = real.iter().map(|v| v + shift).collect();
        let fake_s: Vec<f64> = fake.iter().map(|v| v + shift).collect();
        let (gs, ds) = ragan_values(&real_s, &fake_s);
        assert!((g - gs).abs() < 1e-10);
        assert!((d - ds).abs() < 1e-10);
    }

    #[test]
    fn ragan_rejects_empty_and_mismatched_batches() {
        let mut tape = Tape::new(1);
        let a = tape.var(Tensor::from_vec(&[2, 1, 1, 1], vec![0.0, 1.0]).unwrap());
        let b = tape.var(Tensor::from_vec(&[1, 1, 1, 1], vec![0.0]).unwrap());
        assert!(ragan_losses(&mut tape, a, b).is_err());
    }

    #[test]
    fn ragan_gradients_flow_through_both_means() {
        let mut tape = Tape::new(1);
        let r = tape.var(Tensor::from_vec(&[2, 1, 1, 1], vec![0.6, -0.2]).unwrap());
        let f = tape.var(Tensor::from_vec(&[2, 1, 1, 1], vec![0.1, 0.4]).unwrap());
        let (g, _) = ragan_losses(&mut tape, r, f).unwrap();
        let grads = tape.backward(g).unwrap();
        let gr = grads.of(r).unwrap();
        let gf = grads.of(f).unwrap();
        assert!(gr.data().iter().any(|&v| v != 0.0));
        assert!(gf.data().iter().any(|&v| v != 0.0), "generator logits must receive gradient");
    }

    #[test]
    fn weight_presets_match_the_stated_values() {
        let f = LossWeights::frsr();
        assert_eq!((f.lambda1, f.lambda2, f.lambda3), (1.0, 0.0, 0.0));
        let n = LossWeights::natsr();
        assert_eq!((n.lambda1, n.lambda2, n.lambda3), (1.0, 1e-3, 1e-3));
        assert!(LossWeights { lambda1: -1.0, ..LossWeights::frsr() }.validate().is_err());
    }

    #[test]
    fn total_loss_weighted_sums() {
        let mut tape = Tape::new(1);
        let r = tape.var(Tensor::scalar(0.7));
        let n = tape.var(Tensor::scalar(0.3));
        let a = tape.var(Tensor::scalar(0.4));
        let frsr = total_loss(&mut tape, r, n, a, &LossWeights::frsr()).unwrap();
        assert_eq!(scalar(&tape, frsr), 0.7);
        let ones_r = tape.var(Tensor::scalar(1.0));
        let ones_n = tape.var(Tensor::scalar(1.0));
        let ones_a = tape.var(Tensor::scalar(1.0));
        let natsr = total_loss(&mut tape, ones_r, ones_n, ones_a, &LossWeights::natsr()).unwrap();
        assert!((scalar(&tape, natsr) - 1.002).abs() < 1e-12);
        let zero = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
        let z = total_loss(&mut tape, r, n, a, &zero).unwrap();
        assert_eq!(scalar(&tape, z), 0.0);
    }
}
