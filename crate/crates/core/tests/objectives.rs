use proptest::prelude::*;
use rtda::objectives::{adv_loss, disc_loss, poly_lr, seg_cross_entropy, seg_cross_entropy_logits};
use rtda::{Reduction, Tape, Tensor};

fn logits(values: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(vec![1, 1, 1, values.len()], values).unwrap()
}

#[test]
fn adversarial_gradient_pushes_toward_source_label() {
    let mut tape = Tape::<f64>::new();
    let d = tape.variable(logits(&[-3.0, 0.0, 2.5]));
    let l = adv_loss(&mut tape, d, Reduction::Mean).unwrap();
    let g = tape.backward(l).unwrap();
    let grad = g.wrt(d).unwrap().data();
    for (&x, &gx) in [-3.0f64, 0.0, 2.5].iter().zip(grad) {
        let sigma = 1.0 / (1.0 + (-x).exp());
        assert!(gx < 0.0);
        assert!((gx - (sigma - 1.0) / 3.0).abs() < 1e-15);
    }
}

#[test]
fn logits_and_probability_cross_entropy_agree() {
    let values: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| (i as f64 * 0.9).sin() * 3.0).collect();
    let labels = [0u8, 2, 255, 1, 1, 0, 2, 2];
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_f64(vec![2, 3, 2, 2], &values).unwrap());
    let a = seg_cross_entropy_logits(&mut tape, x, &labels, Reduction::Mean).unwrap();
    let p = tape.softmax_channels(x).unwrap();
    let b = seg_cross_entropy(&mut tape, p, &labels, Reduction::Mean).unwrap();
    let (a, b) = (tape.value(a).data()[0], tape.value(b).data()[0]);
    assert!((a - b).abs() < 1e-12);
}

#[test]
fn all_ignored_pixels_are_an_error() {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(Tensor::full([1, 2, 1, 2], 0.5));
    assert!(seg_cross_entropy(&mut tape, p, &[255, 255], Reduction::Mean).is_err());
}

#[test]
fn poly_schedule_endpoints() {
    assert_eq!(poly_lr(0.01, 0, 100, 0.9), 0.01);
    assert_eq!(poly_lr(0.01, 100, 100, 0.9), 0.0);
    assert!((poly_lr(2.5e-4, 15_000, 30_000, 0.9) - 1.33972e-4).abs() < 1e-9);
}

proptest! {
    #[test]
    fn losses_are_finite_and_nonnegative(
        src in prop::collection::vec(-50.0f64..50.0, 1..12),
        tgt in prop::collection::vec(-50.0f64..50.0, 1..12),
    ) {
        let n = src.len().min(tgt.len());
        let mut tape = Tape::<f64>::new();
        let s = tape.variable(logits(&src[..n]));
        let t = tape.variable(logits(&tgt[..n]));
        let ld = disc_loss(&mut tape, s, t, Reduction::Mean).unwrap();
        let la = adv_loss(&mut tape, t, Reduction::Mean).unwrap();
        for l in [ld, la] {
            let v = tape.value(l).data()[0];
            prop_assert!(v.is_finite() && v >= 0.0);
            let g = tape.backward(l).unwrap();
            prop_assert!(g.wrt(t).unwrap().data().iter().all(|x| x.is_finite()));
        }
        let expected: f64 = src[..n].iter().map(|&x| softplus(-x)).sum::<f64>() / n as f64
            + tgt[..n].iter().map(|&x| softplus(x)).sum::<f64>() / n as f64;
        let got = tape.value(ld).data()[0];
        prop_assert!((got - expected).abs() <= 1e-12 * expected.max(1.0));
    }

    #[test]
    fn cross_entropy_is_nonnegative(values in prop::collection::vec(-30.0f64..30.0, 8), labels in prop::collection::vec(0u8..4, 2)) {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_f64(vec![1, 4, 1, 2], &values).unwrap());
        let l = seg_cross_entropy_logits(&mut tape, x, &labels, Reduction::Mean).unwrap();
        let v = tape.value(l).data()[0];
        prop_assert!(v.is_finite() && v >= 0.0);
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}
