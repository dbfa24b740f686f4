//! Central finite-difference checks for every differentiable primitive.
//!
//! Each primitive is evaluated on random small instances in 64-bit
//! precision. The analytic gradient from [`Tape::backward`] of the projected
//! output `sum(out ⊙ r)` (fixed random `r`) is compared against
//! `(f(x + h) − f(x − h)) / 2h` for every input element.

use rand::{Rng, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

use crate::autodiff::{Reduction, Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Finite-difference step.
pub const STEP: f64 = 1e-5;
/// Acceptance bound on the relative error.
pub const TOLERANCE: f64 = 1e-4;

type Build = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

/// One randomly drawn instance of a primitive.
pub struct Instance {
    inputs: Vec<Tensor<f64>>,
    build: Box<Build>,
}

/// Outcome for one primitive.
#[derive(Debug, Clone)]
pub struct CheckResult {
    pub primitive: &'static str,
    pub instances: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(rng: &mut Xoshiro256StarStar, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Values bounded away from zero, so kinks are never straddled by ±h.
fn rand_off_zero(rng: &mut Xoshiro256StarStar, shape: &[usize]) -> Tensor<f64> {
    let mut t = rand_tensor(rng, shape, 0.05, 2.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

fn image_shape(rng: &mut Xoshiro256StarStar) -> [usize; 4] {
    [
        rng.random_range(1..=2),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
        rng.random_range(1..=4),
    ]
}

fn projected(tape: &mut Tape<f64>, out: Var, proj: &Tensor<f64>) -> Result<Var> {
    if tape.value(out).is_scalar() {
        return Ok(out);
    }
    let r = tape.constant(proj.clone());
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

fn evaluate(inst: &Instance, inputs: &[Tensor<f64>], proj: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = (inst.build)(&mut tape, &vars)?;
    let loss = projected(&mut tape, out, proj)?;
    Ok(tape.value(loss).data()[0])
}

/// Largest relative error (‖analytic − numeric‖ / (‖analytic‖ + ‖numeric‖))
/// over the inputs of one instance.
pub fn check_instance(inst: &Instance, rng: &mut Xoshiro256StarStar) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inst.inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = (inst.build)(&mut tape, &vars)?;
    let proj = rand_tensor(rng, tape.shape(out), -1.0, 1.0);
    let loss = projected(&mut tape, out, &proj)?;
    let grads = tape.backward(loss)?;
    let mut worst: f64 = 0.0;
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inst.inputs[k].shape().to_vec()));
        let mut numeric = vec![0.0; inst.inputs[k].len()];
        let mut probe = inst.inputs.clone();
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = inst.inputs[k].data()[i];
            probe[k].data_mut()[i] = orig + STEP;
            let plus = evaluate(inst, &probe, &proj)?;
            probe[k].data_mut()[i] = orig - STEP;
            let minus = evaluate(inst, &probe, &proj)?;
            probe[k].data_mut()[i] = orig;
            *slot = (plus - minus) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let denom = na + nn;
        let rel = if denom < 1e-12 { diff } else { diff / denom };
        worst = worst.max(rel);
    }
    Ok(worst)
}

type Sampler = fn(&mut Xoshiro256StarStar) -> Instance;

fn sample_conv2d(rng: &mut Xoshiro256StarStar) -> Instance {
    let [n, cin, _, _] = image_shape(rng);
    let k: usize = rng.random_range(1..=4);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=2);
    let lo = k.saturating_sub(2 * pad).max(1);
    let h = rng.random_range(lo..=4.max(lo));
    let w = rng.random_range(lo..=4.max(lo));
    let cout = rng.random_range(1..=4);
    let with_bias = rng.random_bool(0.7);
    let mut inputs = vec![
        rand_tensor(rng, &[n, cin, h, w], -1.0, 1.0),
        rand_tensor(rng, &[cout, cin, k, k], -1.0, 1.0),
    ];
    if with_bias {
        inputs.push(rand_tensor(rng, &[cout], -1.0, 1.0));
    }
    Instance {
        inputs,
        build: Box::new(move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad)),
    }
}

fn sample_depthwise(rng: &mut Xoshiro256StarStar) -> Instance {
    let [n, c, _, _] = image_shape(rng);
    let k: usize = rng.random_range(1..=4);
    let stride = rng.random_range(1..=2);
    let pad = rng.random_range(0..=2);
    let lo = k.saturating_sub(2 * pad).max(1);
    let h = rng.random_range(lo..=4.max(lo));
    let w = rng.random_range(lo..=4.max(lo));
    let inputs = vec![
        rand_tensor(rng, &[n, c, h, w], -1.0, 1.0),
        rand_tensor(rng, &[c, 1, k, k], -1.0, 1.0),
        rand_tensor(rng, &[c], -1.0, 1.0),
    ];
    Instance {
        inputs,
        build: Box::new(move |t, v| t.depthwise_conv2d(v[0], v[1], Some(v[2]), stride, pad)),
    }
}

fn binary(rng: &mut Xoshiro256StarStar, mul: bool) -> Instance {
    let s = image_shape(rng);
    Instance {
        inputs: vec![rand_tensor(rng, &s, -2.0, 2.0), rand_tensor(rng, &s, -2.0, 2.0)],
        build: Box::new(move |t, v| if mul { t.mul(v[0], v[1]) } else { t.add(v[0], v[1]) }),
    }
}

fn unary(rng: &mut Xoshiro256StarStar, lo: f64, hi: f64, f: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Instance {
    let s = image_shape(rng);
    Instance {
        inputs: vec![rand_tensor(rng, &s, lo, hi)],
        build: Box::new(move |t, v| f(t, v[0])),
    }
}

fn kinked(rng: &mut Xoshiro256StarStar, f: fn(&mut Tape<f64>, Var) -> Result<Var>) -> Instance {
    let s = image_shape(rng);
    Instance {
        inputs: vec![rand_off_zero(rng, &s)],
        build: Box::new(move |t, v| f(t, v[0])),
    }
}

fn sample_scale(rng: &mut Xoshiro256StarStar) -> Instance {
    let s = image_shape(rng);
    let factor = rng.random_range(-3.0..3.0);
    Instance {
        inputs: vec![rand_tensor(rng, &s, -2.0, 2.0)],
        build: Box::new(move |t, v| t.scale(v[0], factor)),
    }
}

fn sample_upsample(rng: &mut Xoshiro256StarStar) -> Instance {
    let s = image_shape(rng);
    let oh = s[2] + rng.random_range(0..=5);
    let ow = s[3] + rng.random_range(0..=5);
    Instance {
        inputs: vec![rand_tensor(rng, &s, -2.0, 2.0)],
        build: Box::new(move |t, v| t.upsample_bilinear(v[0], oh, ow)),
    }
}

fn channel_gate(rng: &mut Xoshiro256StarStar, mul: bool) -> Instance {
    let s = image_shape(rng);
    Instance {
        inputs: vec![
            rand_tensor(rng, &s, -2.0, 2.0),
            rand_tensor(rng, &[s[0], s[1], 1, 1], -2.0, 2.0),
        ],
        build: Box::new(move |t, v| if mul { t.mul_channel(v[0], v[1]) } else { t.add_channel(v[0], v[1]) }),
    }
}

fn sample_concat(rng: &mut Xoshiro256StarStar) -> Instance {
    let [n, c, h, w] = image_shape(rng);
    let c2 = rng.random_range(1..=3);
    Instance {
        inputs: vec![
            rand_tensor(rng, &[n, c, h, w], -2.0, 2.0),
            rand_tensor(rng, &[n, c2, h, w], -2.0, 2.0),
        ],
        build: Box::new(|t, v| t.concat_channels(&[v[0], v[1]])),
    }
}

fn sample_bn_train(rng: &mut Xoshiro256StarStar) -> Instance {
    let [_, c, h, w] = image_shape(rng);
    let n = 2;
    Instance {
        inputs: vec![
            rand_tensor(rng, &[n, c, h, w], -2.0, 2.0),
            rand_tensor(rng, &[c], 0.5, 1.5),
            rand_tensor(rng, &[c], -1.0, 1.0),
        ],
        build: Box::new(|t, v| Ok(t.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0)),
    }
}

fn sample_bn_eval(rng: &mut Xoshiro256StarStar) -> Instance {
    let s = image_shape(rng);
    let c = s[1];
    let mean: Vec<f64> = (0..c).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
    Instance {
        inputs: vec![
            rand_tensor(rng, &s, -2.0, 2.0),
            rand_tensor(rng, &[c], 0.5, 1.5),
            rand_tensor(rng, &[c], -1.0, 1.0),
        ],
        build: Box::new(move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5)),
    }
}

fn sample_bce(rng: &mut Xoshiro256StarStar) -> Instance {
    let s = image_shape(rng);
    let target = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    let reduction = if rng.random_bool(0.5) { Reduction::Mean } else { Reduction::Sum };
    Instance {
        inputs: vec![rand_tensor(rng, &s, -5.0, 5.0)],
        build: Box::new(move |t, v| t.bce_with_logits(v[0], target, reduction)),
    }
}

fn sample_nll(rng: &mut Xoshiro256StarStar) -> Instance {
    let [n, c, h, w] = image_shape(rng);
    let c = c.max(2);
    let mut labels: Vec<u8> = (0..n * h * w)
        .map(|_| if rng.random_bool(0.2) { 255 } else { rng.random_range(0..c) as u8 })
        .collect();
    labels[0] = 0;
    Instance {
        inputs: vec![rand_tensor(rng, &[n, c, h, w], -3.0, 0.0)],
        build: Box::new(move |t, v| t.nll(v[0], &labels, 255, Reduction::Mean)),
    }
}

/// Every differentiable primitive with its instance sampler.
pub fn primitives() -> Vec<(&'static str, Sampler)> {
    vec![
        ("conv2d", sample_conv2d),
        ("depthwise_conv2d", sample_depthwise),
        ("add", |r| binary(r, false)),
        ("mul", |r| binary(r, true)),
        ("scale", sample_scale),
        ("ln", |r| unary(r, 0.2, 3.0, Tape::ln)),
        ("sigmoid", |r| unary(r, -4.0, 4.0, Tape::sigmoid)),
        ("leaky_relu", |r| kinked(r, |t, v| t.leaky_relu(v, 0.2))),
        ("relu", |r| kinked(r, Tape::relu)),
        ("softmax_channels", |r| unary(r, -3.0, 3.0, Tape::softmax_channels)),
        ("log_softmax_channels", |r| unary(r, -3.0, 3.0, Tape::log_softmax_channels)),
        ("upsample_bilinear", sample_upsample),
        ("reduce_sum", |r| unary(r, -2.0, 2.0, Tape::sum)),
        ("reduce_mean", |r| unary(r, -2.0, 2.0, Tape::mean)),
        ("global_avg_pool", |r| unary(r, -2.0, 2.0, Tape::global_avg_pool)),
        ("mul_channel", |r| channel_gate(r, true)),
        ("add_channel", |r| channel_gate(r, false)),
        ("concat_channels", sample_concat),
        ("batch_norm_train", sample_bn_train),
        ("batch_norm_eval", sample_bn_eval),
        ("bce_with_logits", sample_bce),
        ("nll", sample_nll),
    ]
}

/// Run `instances` random checks per primitive from a fixed seed.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Xoshiro256StarStar::seed_from_u64(seed);
    let mut results = Vec::new();
    for (name, sample) in primitives() {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let inst = sample(&mut rng);
            worst = worst.max(check_instance(&inst, &mut rng)?);
        }
        results.push(CheckResult {
            primitive: name,
            instances,
            max_rel_error: worst,
        });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn a_wrong_gradient_is_detected() {
        // f(x) = x² written as x·x, but with the rhs detached: the tape only
        // sees half the derivative, which the finite differences expose.
        let inst = Instance {
            inputs: vec![Tensor::from_f64([1, 1, 1, 2], &[0.7, -1.3]).unwrap()],
            build: Box::new(|t, v| {
                let d = t.detach(v[0]);
                t.mul(v[0], d)
            }),
        };
        let mut rng = Xoshiro256StarStar::seed_from_u64(1);
        assert!(check_instance(&inst, &mut rng).unwrap() > 0.1);
    }
}
