//! Segmentation, discriminator and adversarial losses, plus the poly
//! learning-rate schedule.
//!
//! All spatial reductions default to a mean over contributing positions;
//! [`Reduction::Sum`] gives literal summation. Discriminator losses work on
//! raw logits through the stable binary cross-entropy form; source maps
//! carry label 1 and target maps label 0.

use crate::autodiff::{Reduction, Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;

/// Label value excluded from the segmentation loss and from metrics.
pub const IGNORE_INDEX: u8 = 255;

/// A scalar loss read back from the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub reduction: Reduction,
    /// Number of positions that contributed.
    pub count: usize,
}

impl LossValue {
    pub fn read<T: Real>(tape: &Tape<T>, var: Var, reduction: Reduction, count: usize) -> Self {
        LossValue {
            value: tape.value(var).data()[0].to_f64(),
            reduction,
            count,
        }
    }
}

/// Cross-entropy of per-pixel probabilities `probs[N,C,H,W]` against
/// `labels[N,H,W]`: −mean log P at the true class over non-ignored pixels.
pub fn seg_cross_entropy<T: Real>(tape: &mut Tape<T>, probs: Var, labels: &[u8], reduction: Reduction) -> Result<Var> {
    let logp = tape.ln(probs)?;
    tape.nll(logp, labels, IGNORE_INDEX, reduction)
}

/// Same loss computed from logits through a log-softmax, which stays finite
/// when a probability underflows.
pub fn seg_cross_entropy_logits<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[u8], reduction: Reduction) -> Result<Var> {
    let logp = tape.log_softmax_channels(logits)?;
    tape.nll(logp, labels, IGNORE_INDEX, reduction)
}

/// Discriminator loss: BCE(source → 1) + BCE(target → 0).
pub fn disc_loss<T: Real>(tape: &mut Tape<T>, d_src: Var, d_tgt: Var, reduction: Reduction) -> Result<Var> {
    check_single_channel(tape, d_src)?;
    check_single_channel(tape, d_tgt)?;
    let src = tape.bce_with_logits(d_src, 1.0, reduction)?;
    let tgt = tape.bce_with_logits(d_tgt, 0.0, reduction)?;
    tape.add(src, tgt)
}

/// Adversarial loss on target maps: BCE(target → source label 1).
pub fn adv_loss<T: Real>(tape: &mut Tape<T>, d_tgt: Var, reduction: Reduction) -> Result<Var> {
    check_single_channel(tape, d_tgt)?;
    tape.bce_with_logits(d_tgt, 1.0, reduction)
}

/// `l_seg + λ·l_adv`.
pub fn total_seg_objective<T: Real>(tape: &mut Tape<T>, l_seg: Var, l_adv: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0) {
        return Err(Error::Invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    let weighted = tape.scale(l_adv, lambda)?;
    tape.add(l_seg, weighted)
}

/// Scalar counterpart of [`total_seg_objective`] for recorded values.
pub fn combine(l_seg: LossValue, l_adv: LossValue, lambda: f64) -> LossValue {
    LossValue {
        value: l_seg.value + lambda * l_adv.value,
        reduction: l_seg.reduction,
        count: l_seg.count,
    }
}

/// `base · (1 − iter/max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: u64, max_iter: u64, power: f64) -> f64 {
    if max_iter == 0 {
        return 0.0;
    }
    let frac = 1.0 - (iter.min(max_iter) as f64 / max_iter as f64);
    base_lr * frac.powf(power)
}

fn check_single_channel<T: Real>(tape: &Tape<T>, v: Var) -> Result<()> {
    match tape.shape(v) {
        [_, 1, _, _] => Ok(()),
        s => Err(Error::shape("discriminator loss", format!("expected [N,1,H,W] logits, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn logits(tape: &mut Tape<f64>, v: f64) -> Var {
        tape.constant(Tensor::full([2, 1, 3, 3], v))
    }

    fn scalar(tape: &Tape<f64>, v: Var) -> f64 {
        tape.value(v).data()[0]
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::full([1, 19, 2, 2], 1.0 / 19.0));
        let l = seg_cross_entropy(&mut tape, p, &[0, 5, 18, 3], Reduction::Mean).unwrap();
        assert!((scalar(&tape, l) - 19f64.ln()).abs() < 1e-12);

        let p = tape.constant(Tensor::from_f64([1, 2, 1, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        // ln(0) at the wrong class is never read by the loss, but ln is
        // elementwise, so a one-hot map must go through the logits path.
        assert!(seg_cross_entropy(&mut tape, p, &[0, 1], Reduction::Mean).is_err());
        let z = tape.constant(Tensor::from_f64([1, 2, 1, 2], &[60.0, -60.0, -60.0, 60.0]).unwrap());
        let l = seg_cross_entropy_logits(&mut tape, z, &[0, 1], Reduction::Mean).unwrap();
        assert!(scalar(&tape, l) < 1e-40);

        let p = tape.constant(Tensor::from_f64([1, 2, 1, 2], &[0.8, 0.5, 0.2, 0.5]).unwrap());
        let l = seg_cross_entropy(&mut tape, p, &[0, 1], Reduction::Mean).unwrap();
        let expected = (-(0.8f64.ln()) - 0.5f64.ln()) / 2.0;
        assert!((scalar(&tape, l) - expected).abs() < 1e-12);
        assert!((expected - 0.45815).abs() < 1e-5);
    }

    #[test]
    fn cross_entropy_skips_ignored_pixels() {
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::from_f64([1, 2, 1, 2], &[0.8, 0.1, 0.2, 0.9]).unwrap());
        let l = seg_cross_entropy(&mut tape, p, &[0, IGNORE_INDEX], Reduction::Mean).unwrap();
        assert!((scalar(&tape, l) + 0.8f64.ln()).abs() < 1e-12);
        assert!(seg_cross_entropy(&mut tape, p, &[IGNORE_INDEX, IGNORE_INDEX], Reduction::Mean).is_err());
    }

    #[test]
    fn discriminator_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let (s, t) = (logits(&mut tape, 0.0), logits(&mut tape, 0.0));
        let l = disc_loss(&mut tape, s, t, Reduction::Mean).unwrap();
        assert!((scalar(&tape, l) - 2.0 * 2f64.ln()).abs() < 1e-12);

        let (s, t) = (logits(&mut tape, 20.0), logits(&mut tape, -20.0));
        let l = disc_loss(&mut tape, s, t, Reduction::Mean).unwrap();
        assert!(scalar(&tape, l) < 1e-8);

        let (s, t) = (logits(&mut tape, 3f64.ln()), logits(&mut tape, 3f64.ln()));
        let l = disc_loss(&mut tape, s, t, Reduction::Mean).unwrap();
        let expected = -(0.75f64.ln()) - 0.25f64.ln();
        assert!((scalar(&tape, l) - expected).abs() < 1e-12);
        assert!((expected - 1.67398).abs() < 1e-5);
    }

    #[test]
    fn adversarial_loss_examples() {
        let mut tape = Tape::<f64>::new();
        let t = logits(&mut tape, 0.0);
        let l = adv_loss(&mut tape, t, Reduction::Mean).unwrap();
        assert!((scalar(&tape, l) - 2f64.ln()).abs() < 1e-12);
        let t = logits(&mut tape, 20.0);
        let l = adv_loss(&mut tape, t, Reduction::Mean).unwrap();
        assert!(scalar(&tape, l) < 1e-8);
        let t = logits(&mut tape, -(3f64.ln()));
        let l = adv_loss(&mut tape, t, Reduction::Mean).unwrap();
        assert!((scalar(&tape, l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sum_reduction_scales_by_position_count() {
        let mut tape = Tape::<f64>::new();
        let t = logits(&mut tape, 0.0);
        let l = adv_loss(&mut tape, t, Reduction::Sum).unwrap();
        assert!((scalar(&tape, l) - 18.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn discriminator_losses_need_single_channel_logits() {
        let mut tape = Tape::<f64>::new();
        let t = tape.constant(Tensor::zeros([1, 2, 2, 2]));
        assert!(adv_loss(&mut tape, t, Reduction::Mean).is_err());
    }

    #[test]
    fn total_objective_examples() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::scalar(2.0));
        let b = tape.constant(Tensor::scalar(0.5));
        let l = total_seg_objective(&mut tape, a, b, 0.01).unwrap();
        assert!((scalar(&tape, l) - 2.005).abs() < 1e-12);
        let l = total_seg_objective(&mut tape, a, b, 0.0).unwrap();
        assert_eq!(scalar(&tape, l), 2.0);
        assert!(total_seg_objective(&mut tape, a, b, -1.0).is_err());

        let v = |x| LossValue {
            value: x,
            reduction: Reduction::Mean,
            count: 1,
        };
        let c = combine(v(19f64.ln()), v(2f64.ln()), 0.01);
        assert!((c.value - 2.95137).abs() < 1e-5);
    }

    #[test]
    fn poly_schedule_examples() {
        assert_eq!(poly_lr(2.5e-4, 0, 30_000, 0.9), 2.5e-4);
        assert_eq!(poly_lr(2.5e-4, 30_000, 30_000, 0.9), 0.0);
        let mid = poly_lr(2.5e-4, 15_000, 30_000, 0.9);
        assert!((mid - 1.33972e-4).abs() < 1e-9, "{mid}");
        assert!((mid - 2.5e-4 * 0.5f64.powf(0.9)).abs() < 1e-18);
    }
}
