use std::collections::BTreeSet;

use proptest::prelude::*;
use rtda::data::SeededRng;
use rtda::metrics::ConfusionMatrix;

fn gcd(a: u128, b: u128) -> u128 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Exact fraction `num / den` in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ratio(u128, u128);

impl Ratio {
    fn new(num: u128, den: u128) -> Self {
        let g = gcd(num, den).max(1);
        Ratio(num / g, den / g)
    }

    fn add(self, o: Ratio) -> Ratio {
        Ratio::new(self.0 * o.1 + o.0 * self.1, self.1 * o.1)
    }
}

/// IoU per class from explicit pixel-index sets; `None` for classes absent
/// from both masks.
fn set_iou(pred: &[u8], truth: &[u8], k: usize) -> Vec<Option<Ratio>> {
    (0..k)
        .map(|c| {
            let p: BTreeSet<usize> = (0..pred.len()).filter(|&i| pred[i] as usize == c && truth[i] != 255).collect();
            let t: BTreeSet<usize> = (0..truth.len()).filter(|&i| truth[i] as usize == c).collect();
            let union = p.union(&t).count() as u128;
            let inter = p.intersection(&t).count() as u128;
            (union > 0).then(|| Ratio::new(inter, union))
        })
        .collect()
}

#[test]
fn miou_matches_set_based_oracle() {
    let mut rng = SeededRng::new(2024);
    for case in 0..200 {
        let k = rng.below(2, 7);
        let h = rng.below(1, 17);
        let w = rng.below(1, 17);
        let n = h * w;
        let truth: Vec<u8> = (0..n)
            .map(|_| if rng.uniform() < 0.05 { 255 } else { rng.below(0, k) as u8 })
            .collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.below(0, k) as u8).collect();
        let mut cm = ConfusionMatrix::new(k);
        cm.accumulate(&pred, &truth).unwrap();
        let oracle = set_iou(&pred, &truth, k);
        let scored: Vec<Ratio> = oracle.iter().flatten().copied().collect();
        let Ok(report) = cm.report(None) else {
            assert!(scored.is_empty(), "case {case}");
            continue;
        };
        for (c, expected) in oracle.iter().enumerate() {
            assert_eq!(report.per_class[c].1, expected.map(|r| r.0 as f64 / r.1 as f64), "case {case} class {c}");
        }
        let sum = scored.iter().fold(Ratio(0, 1), |acc, &r| acc.add(r));
        let mean = Ratio::new(sum.0, sum.1 * scored.len() as u128);
        let exact = mean.0 as f64 / mean.1 as f64;
        assert!((report.mean - exact).abs() <= 4.0 * f64::EPSILON, "case {case}: {} vs {exact}", report.mean);
    }
}

#[test]
fn perfect_and_disjoint_predictions() {
    let truth = [0u8, 1, 2, 1, 0, 2];
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&truth, &truth).unwrap();
    assert_eq!(cm.report(None).unwrap().mean, 1.0);
    let shifted: Vec<u8> = truth.iter().map(|&t| (t + 1) % 3).collect();
    let mut cm = ConfusionMatrix::new(3);
    cm.accumulate(&shifted, &truth).unwrap();
    assert_eq!(cm.report(None).unwrap().mean, 0.0);
}

#[test]
fn out_of_range_inputs_are_rejected() {
    let mut cm = ConfusionMatrix::new(3);
    assert!(cm.accumulate(&[3], &[0]).is_err());
    assert!(cm.accumulate(&[0], &[7]).is_err());
    assert!(cm.accumulate(&[0, 1], &[0]).is_err());
    assert!(cm.report(Some(&[5])).is_err());
    assert_eq!(cm.total(), 0);
    assert!(cm.merge(&ConfusionMatrix::new(4)).is_err());
}

fn masks() -> impl Strategy<Value = (usize, Vec<(u8, u8)>)> {
    (2usize..7).prop_flat_map(|k| {
        let label = prop_oneof![9 => 0..k as u8, 1 => Just(255u8)];
        (Just(k), prop::collection::vec((0..k as u8, label), 1..200))
    })
}

proptest! {
    #[test]
    fn accumulation_is_order_independent((k, pairs) in masks(), split in 0usize..200, rot in 0usize..200) {
        let (pred, truth): (Vec<u8>, Vec<u8>) = pairs.iter().copied().unzip();
        let mut whole = ConfusionMatrix::new(k);
        whole.accumulate(&pred, &truth).unwrap();

        let mut rotated = pairs.clone();
        let r = rot % rotated.len();
        rotated.rotate_left(r);
        rotated.reverse();
        let (rp, rt): (Vec<u8>, Vec<u8>) = rotated.into_iter().unzip();
        let mut reordered = ConfusionMatrix::new(k);
        reordered.accumulate(&rp, &rt).unwrap();
        prop_assert_eq!(&whole, &reordered);

        let s = split % (pairs.len() + 1);
        let mut a = ConfusionMatrix::new(k);
        a.accumulate(&pred[..s], &truth[..s]).unwrap();
        let mut b = ConfusionMatrix::new(k);
        b.accumulate(&pred[s..], &truth[s..]).unwrap();
        let mut ba = b.clone();
        a.merge(&b).unwrap();
        ba.merge(&{
            let mut first = ConfusionMatrix::new(k);
            first.accumulate(&pred[..s], &truth[..s]).unwrap();
            first
        }).unwrap();
        prop_assert_eq!(&whole, &a);
        prop_assert_eq!(&whole, &ba);

        let counted = truth.iter().filter(|&&t| t != 255).count() as u64;
        prop_assert_eq!(whole.total(), counted);
        if let Ok(report) = whole.report(None) {
            prop_assert!((0.0..=1.0).contains(&report.mean));
        }
    }
}
