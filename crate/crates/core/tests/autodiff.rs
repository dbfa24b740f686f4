use proptest::prelude::*;
use rtda::{gradcheck, Tape, Tensor};

fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape.to_vec(), v).unwrap()
}

#[test]
fn gradient_suite_passes() {
    for r in gradcheck::run_suite(20, 7).unwrap() {
        assert!(r.passed(), "{} rel err {:e}", r.primitive, r.max_rel_error);
    }
}

#[test]
fn conv2d_sum_of_ones() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let w = tape.constant(Tensor::full([1, 1, 3, 3], 1.0));
    let b = tape.constant(Tensor::zeros([1]));
    let y = tape.conv2d(x, w, Some(b), 1, 0).unwrap();
    assert_eq!(tape.shape(y), [1, 1, 1, 1]);
    assert_eq!(tape.value(y).data(), [9.0]);
}

#[test]
fn conv2d_output_shape_at_full_resolution() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 19, 512, 1024]));
    let w = tape.constant(Tensor::zeros([1, 19, 4, 4]));
    let y = tape.conv2d(x, w, None, 2, 1).unwrap();
    assert_eq!(tape.shape(y), [1, 1, 256, 512]);
    let wd = tape.constant(Tensor::zeros([19, 1, 4, 4]));
    let yd = tape.depthwise_conv2d(x, wd, None, 2, 1).unwrap();
    assert_eq!(tape.shape(yd), [1, 19, 256, 512]);
}

#[test]
fn conv2d_identity_kernel() {
    let mut tape = Tape::<f64>::new();
    let data: Vec<f64> = (0..12).map(|i| i as f64 * 0.5 - 2.0).collect();
    let x = tape.constant(t(&[1, 1, 3, 4], &data));
    let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = tape.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &data[..]);
}

#[test]
fn conv2d_rejects_channel_mismatch_and_small_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 2, 3, 3]));
    let w = tape.constant(Tensor::zeros([1, 3, 3, 3]));
    assert!(tape.conv2d(x, w, None, 1, 0).is_err());
    let w4 = tape.constant(Tensor::zeros([1, 2, 4, 4]));
    assert!(tape.conv2d(x, w4, None, 1, 0).is_err());
}

#[test]
fn depthwise_channels_are_independent() {
    let mut tape = Tape::<f64>::new();
    let mut data = vec![1.0; 9];
    data.extend(vec![0.0; 9]);
    let x = tape.constant(t(&[1, 2, 3, 3], &data));
    let w = tape.constant(Tensor::full([2, 1, 3, 3], 1.0));
    let y = tape.depthwise_conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), [9.0, 0.0]);
}

#[test]
fn leaky_relu_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[3], &[1.0, -1.0, 0.0]));
    let y = tape.leaky_relu(x, 0.2).unwrap();
    assert_eq!(tape.value(y).data(), [1.0, -0.2, 0.0]);
    assert!(tape.leaky_relu(x, 1.5).is_err());
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::zeros([1, 19, 2, 2]));
    let y = tape.softmax_channels(x).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 19.0).abs() < 1e-15);
    }
    let x = tape.constant(t(&[1, 2, 1, 1], &[2f64.ln(), 0.0]));
    let y = tape.softmax_channels(x).unwrap();
    let p = tape.value(y).data();
    assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
}

#[test]
fn upsample_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full([1, 1, 4, 4], 3.5));
    let y = tape.upsample_bilinear(x, 8, 8).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 3.5));

    let x = tape.constant(t(&[1, 1, 1, 1], &[-0.75]));
    let y = tape.upsample_bilinear(x, 5, 3).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == -0.75));

    let x = tape.constant(t(&[1, 1, 2, 1], &[0.0, 1.0]));
    let y = tape.upsample_bilinear(x, 4, 1).unwrap();
    assert_eq!(tape.value(y).data(), [0.0, 0.25, 0.75, 1.0]);

    assert!(tape.upsample_bilinear(x, 0, 1).is_err());
}

#[test]
fn backward_linear_case_and_accumulation() {
    let xs = [0.5, -1.5, 2.0, 3.25];
    let mut tape = Tape::<f64>::new();
    let w = tape.variable(t(&[4], &[0.1, 0.2, 0.3, 0.4]));
    let x = tape.constant(t(&[4], &xs));
    let p = tape.mul(w, x).unwrap();
    let loss = tape.sum(p).unwrap();
    let g1 = tape.backward(loss).unwrap();
    assert_eq!(g1.wrt(w).unwrap().data(), xs);

    // Accumulating two sweeps doubles the gradient.
    let g2 = tape.backward(loss).unwrap();
    let mut acc = g1.wrt(w).unwrap().clone();
    acc.add_assign(g2.wrt(w).unwrap()).unwrap();
    let doubled: Vec<f64> = xs.iter().map(|v| 2.0 * v).collect();
    assert_eq!(acc.data(), &doubled[..]);

    assert!(tape.backward(p).is_err(), "non-scalar loss must be rejected");
}

#[test]
fn mean_squared_conv_matches_finite_differences() {
    // loss = mean(conv2d(x, w)²); check ∂loss/∂w with step 1e-5.
    let xs: Vec<f64> = (0..2 * 3 * 4 * 4).map(|i| ((i * 7 % 13) as f64 - 6.0) / 5.0).collect();
    let ws: Vec<f64> = (0..2 * 3 * 3 * 3).map(|i| ((i * 5 % 11) as f64 - 5.0) / 7.0).collect();
    let loss_at = |w: &[f64]| -> f64 {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3, 4, 4], &xs));
        let wv = tape.constant(t(&[2, 3, 3, 3], w));
        let y = tape.conv2d(x, wv, None, 1, 1).unwrap();
        let sq = tape.mul(y, y).unwrap();
        let m = tape.mean(sq).unwrap();
        tape.value(m).data()[0]
    };
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2, 3, 4, 4], &xs));
    let w = tape.variable(t(&[2, 3, 3, 3], &ws));
    let y = tape.conv2d(x, w, None, 1, 1).unwrap();
    let sq = tape.mul(y, y).unwrap();
    let m = tape.mean(sq).unwrap();
    let g = tape.backward(m).unwrap();
    let analytic = g.wrt(w).unwrap().data().to_vec();
    let h = 1e-5;
    for i in 0..ws.len() {
        let mut p = ws.clone();
        p[i] += h;
        let mut q = ws.clone();
        q[i] -= h;
        let numeric = (loss_at(&p) - loss_at(&q)) / (2.0 * h);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-8);
        assert!(rel < 1e-4, "w[{i}]: {} vs {numeric}", analytic[i]);
    }
}

#[test]
fn ln_of_zero_is_an_error() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[2], &[1.0, 0.0]));
    assert!(tape.ln(x).unwrap_err().is_numerical());
}

#[test]
fn detach_cuts_the_gradient() {
    let mut tape = Tape::<f64>::new();
    let w = tape.variable(t(&[2], &[1.0, 2.0]));
    let y = tape.scale(w, 3.0).unwrap();
    let d = tape.detach(y);
    let s = tape.sum(d).unwrap();
    assert!(!tape.requires_grad(s));
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(w).is_none());
}

fn random_image(seed: u64, shape: [usize; 4]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut s = seed;
    let data = (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 33) as f64 / (1u64 << 31) as f64) * 2.0 - 1.0
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[test]
fn depthwise_equals_block_diagonal_conv2d() {
    for (seed, k, stride, pad) in [(1u64, 3usize, 1usize, 1usize), (2, 4, 2, 1), (3, 2, 1, 0), (4, 4, 2, 2)] {
        let x = random_image(seed, [2, 2, 6, 5]);
        let wd = random_image(seed + 100, [2, 1, k, k]);
        let mut wfull = vec![0.0; 2 * 2 * k * k];
        for c in 0..2 {
            for i in 0..k * k {
                wfull[(c * 2 + c) * k * k + i] = wd.data()[c * k * k + i];
            }
        }
        let bias = t(&[2], &[0.25, -0.5]);
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let b = tape.constant(bias);
        let wdv = tape.constant(wd);
        let wf = tape.constant(t(&[2, 2, k, k], &wfull));
        let a = tape.depthwise_conv2d(xv, wdv, Some(b), stride, pad).unwrap();
        let c = tape.conv2d(xv, wf, Some(b), stride, pad).unwrap();
        assert_eq!(tape.value(a), tape.value(c));
    }
}

#[test]
fn one_hot_kernel_is_a_shifted_crop() {
    let x = random_image(9, [1, 1, 5, 6]);
    for (dy, dx) in [(0usize, 0usize), (1, 2), (2, 1)] {
        let mut w = vec![0.0; 9];
        w[dy * 3 + dx] = 1.0;
        let mut tape = Tape::<f64>::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(t(&[1, 1, 3, 3], &w));
        let y = tape.conv2d(xv, wv, None, 1, 0).unwrap();
        let out = tape.value(y).data();
        for oy in 0..3 {
            for ox in 0..4 {
                assert_eq!(out[oy * 4 + ox], x.data()[(oy + dy) * 6 + ox + dx]);
            }
        }
    }
}

#[test]
fn repeated_execution_is_bitwise_identical() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(random_image(5, [2, 3, 8, 8]).cast());
        let w = tape.variable(random_image(6, [4, 3, 3, 3]).cast());
        let y = tape.conv2d(x, w, None, 2, 1).unwrap();
        let y = tape.softmax_channels(y).unwrap();
        let y = tape.upsample_bilinear(y, 8, 8).unwrap();
        let l = tape.mean(y).unwrap();
        let g = tape.backward(l).unwrap();
        (tape.value(y).clone(), g.wrt(w).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gb.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #[test]
    fn softmax_normalizes_and_ignores_shifts(
        raw in prop::collection::vec(-64i32..64, 12),
        shift in -20i32..20,
    ) {
        // Values on a 1/8 grid keep the shift exact in f64.
        let vals: Vec<f64> = raw.iter().map(|&v| v as f64 / 8.0).collect();
        let shifted: Vec<f64> = vals.iter().map(|v| v + shift as f64).collect();
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 3, 2, 2], &vals));
        let b = tape.constant(t(&[1, 3, 2, 2], &shifted));
        let pa = tape.softmax_channels(a).unwrap();
        let pb = tape.softmax_channels(b).unwrap();
        prop_assert_eq!(tape.value(pa), tape.value(pb));
        let p = tape.value(pa).data();
        for px in 0..4 {
            let s: f64 = (0..3).map(|c| p[c * 4 + px]).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
