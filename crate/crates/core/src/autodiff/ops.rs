//! Differentiable primitives: forward constructors on [`Tape`] plus the
//! matching vector-Jacobian products.

use crate::error::{Error, Result};
use crate::kernels::{self, LinearTaps, Window};
use crate::real::Real;
use crate::tensor::Tensor;

use super::{Op, Tape, Var};

/// How a loss combines per-position terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    /// Mean over contributing positions.
    #[default]
    Mean,
    /// Plain sum.
    Sum,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn channel_gate_dims(op: &'static str, x: &[usize], g: &[usize]) -> Result<(usize, usize, usize)> {
    match (x, g) {
        ([n, c, h, w], [gn, gc, 1, 1]) if n == gn && c == gc => Ok((*n, *c, h * w)),
        _ => Err(Error::shape(op, format!("input {x:?} with per-channel {g:?}"))),
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

impl<T: Real> Tape<T> {
    fn conv_bias_check(&self, b: Option<Var>, cout: usize, op: &'static str) -> Result<()> {
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(op, format!("bias {:?} for {cout} channels", self.shape(b))));
            }
        }
        Ok(())
    }

    /// Cross-correlation of `x[N,Cin,H,W]` with `w[Cout,Cin,k,k]` plus bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, cin, h, wd) = self.value(x).dims4()?;
        let (cout, wcin, k, k2) = self.value(w).dims4()?;
        if wcin != cin || k != k2 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        self.conv_bias_check(b, cout, "conv2d")?;
        let win = Window::new(cin, h, wd, k, stride, pad).ok_or_else(|| {
            Error::shape("conv2d", format!("window k={k} s={stride} p={pad} on {h}x{wd}"))
        })?;
        let area = win.out_area();
        let patch = cin * k * k;
        let keep_cols = self.wants_grad(w.index()) && !win.is_pointwise();
        let mut out = vec![T::ZERO; n * cout * area];
        let mut saved = Vec::new();
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let image = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
                let dst = &mut out[s * cout * area..(s + 1) * cout * area];
                if win.is_pointwise() {
                    kernels::gemm_acc(cout, patch, area, wv, image, dst);
                } else {
                    let cols = kernels::im2col(&win, image);
                    kernels::gemm_acc(cout, patch, area, wv, &cols, dst);
                    if keep_cols {
                        saved.push(cols);
                    }
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for (co, &bias) in bv.iter().enumerate() {
                        for v in &mut out[(s * cout + co) * area..(s * cout + co + 1) * area] {
                            *v += bias;
                        }
                    }
                }
            }
        }
        let value = Tensor::new([n, cout, win.out_h, win.out_w], out)?;
        let mut inputs = vec![x.index(), w.index()];
        inputs.extend(b.map(Var::index));
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x: x.index(),
                w: w.index(),
                b: b.map(Var::index),
                win,
                cols: saved,
            },
            &inputs,
        )
    }

    /// Per-channel convolution: `w[C,1,k,k]`, output channel c reads only
    /// input channel c.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (n, c, h, wd) = self.value(x).dims4()?;
        let (wc, one, k, k2) = self.value(w).dims4()?;
        if wc != c || one != 1 || k != k2 {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input {:?} vs weight {:?}", self.shape(x), self.shape(w)),
            ));
        }
        self.conv_bias_check(b, c, "depthwise_conv2d")?;
        let win = Window::new(c, h, wd, k, stride, pad).ok_or_else(|| {
            Error::shape("depthwise_conv2d", format!("window k={k} s={stride} p={pad} on {h}x{wd}"))
        })?;
        let area = win.out_area();
        let keep = self.wants_grad(w.index()) || self.wants_grad(x.index());
        let mut out = vec![T::ZERO; n * c * area];
        let mut saved = Vec::new();
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            for s in 0..n {
                let padded = kernels::pad_image(&win, &xv[s * c * h * wd..(s + 1) * c * h * wd]);
                kernels::depthwise_forward(&win, &padded, wv, &mut out[s * c * area..(s + 1) * c * area]);
                if keep {
                    saved.push(padded);
                }
            }
            if let Some(b) = b {
                let bv = self.value(b).data();
                for s in 0..n {
                    for (ch, &bias) in bv.iter().enumerate() {
                        for v in &mut out[(s * c + ch) * area..(s * c + ch + 1) * area] {
                            *v += bias;
                        }
                    }
                }
            }
        }
        let value = Tensor::new([n, c, win.out_h, win.out_w], out)?;
        let mut inputs = vec![x.index(), w.index()];
        inputs.extend(b.map(Var::index));
        self.push(
            "depthwise_conv2d",
            value,
            Op::Depthwise {
                x: x.index(),
                w: w.index(),
                b: b.map(Var::index),
                win,
                padded: saved,
            },
            &inputs,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("add", value, Op::Add(a.index(), b.index()), &[a.index(), b.index()])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        self.push("mul", value, Op::Mul(a.index(), b.index()), &[a.index(), b.index()])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::from_f64(s);
        let value = self.value(a).map(|v| v * s);
        self.push("scale", value, Op::Scale(a.index(), s), &[a.index()])
    }

    /// Natural logarithm; non-positive inputs surface as a non-finite error.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|v| v.ln());
        self.push("ln", value, Op::Ln(a.index()), &[a.index()])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(sigmoid);
        self.push("sigmoid", value, Op::Sigmoid(a.index()), &[a.index()])
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::Invalid(format!("leaky_relu slope {slope} outside (0,1)")));
        }
        self.rectify(a, slope)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.rectify(a, 0.0)
    }

    fn rectify(&mut self, a: Var, slope: f64) -> Result<Var> {
        let s = T::from_f64(slope);
        let value = self.value(a).map(|v| if v >= T::ZERO { v } else { s * v });
        self.push("leaky_relu", value, Op::LeakyRelu(a.index(), s), &[a.index()])
    }

    fn channel_softmax(&self, a: Var, log: bool) -> Result<Tensor<T>> {
        let (n, c, h, w) = self.value(a).dims4()?;
        if c == 0 {
            return Err(Error::shape("softmax_channels", "zero channels"));
        }
        let hw = h * w;
        let x = self.value(a).data();
        let mut out = vec![T::ZERO; x.len()];
        for s in 0..n {
            let base = s * c * hw;
            for p in 0..hw {
                let mut m = x[base + p];
                for ch in 1..c {
                    m = m.max(x[base + ch * hw + p]);
                }
                let mut z = T::ZERO;
                for ch in 0..c {
                    let e = (x[base + ch * hw + p] - m).exp();
                    out[base + ch * hw + p] = e;
                    z += e;
                }
                if log {
                    let lz = z.ln();
                    for ch in 0..c {
                        let i = base + ch * hw + p;
                        out[i] = (x[i] - m) - lz;
                    }
                } else {
                    for ch in 0..c {
                        out[base + ch * hw + p] = out[base + ch * hw + p] / z;
                    }
                }
            }
        }
        Tensor::new([n, c, h, w], out)
    }

    /// Per-pixel softmax over the channel axis of `[N,C,H,W]`.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let value = self.channel_softmax(a, false)?;
        self.push("softmax_channels", value, Op::Softmax(a.index()), &[a.index()])
    }

    pub fn log_softmax_channels(&mut self, a: Var) -> Result<Var> {
        let value = self.channel_softmax(a, true)?;
        self.push("log_softmax_channels", value, Op::LogSoftmax(a.index()), &[a.index()])
    }

    /// Bilinear resampling with half-pixel centers (align_corners = false).
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Invalid("upsample target extents must be nonzero".into()));
        }
        if out_h < h || out_w < w {
            return Err(Error::shape(
                "upsample_bilinear",
                format!("{h}x{w} -> {out_h}x{out_w} would downsample"),
            ));
        }
        let taps_h = LinearTaps::new(h, out_h);
        let taps_w = LinearTaps::new(w, out_w);
        let fx: Vec<T> = taps_w.frac.iter().map(|&f| T::from_f64(f)).collect();
        let x = self.value(a).data();
        let mut out = vec![T::ZERO; n * c * out_h * out_w];
        for plane in 0..n * c {
            let src = &x[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * out_h * out_w..(plane + 1) * out_h * out_w];
            for oy in 0..out_h {
                let fy = T::from_f64(taps_h.frac[oy]);
                let r0 = &src[taps_h.lo[oy] * w..][..w];
                let r1 = &src[taps_h.hi[oy] * w..][..w];
                for ox in 0..out_w {
                    let (l, r) = (taps_w.lo[ox], taps_w.hi[ox]);
                    let top = r0[l] + fx[ox] * (r0[r] - r0[l]);
                    let bot = r1[l] + fx[ox] * (r1[r] - r1[l]);
                    dst[oy * out_w + ox] = top + fy * (bot - top);
                }
            }
        }
        let value = Tensor::new([n, c, out_h, out_w], out)?;
        self.push(
            "upsample_bilinear",
            value,
            Op::Upsample {
                x: a.index(),
                taps_h,
                taps_w,
            },
            &[a.index()],
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("reduce_sum", value, Op::Sum(a.index()), &[a.index()])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(Error::shape("reduce_mean", "empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / T::from_f64(t.len() as f64));
        self.push("reduce_mean", value, Op::Mean(a.index()), &[a.index()])
    }

    /// Spatial mean: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(a).dims4()?;
        let hw = h * w;
        let inv = T::from_f64(1.0 / hw as f64);
        let x = self.value(a).data();
        let out = (0..n * c)
            .map(|p| x[p * hw..(p + 1) * hw].iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new([n, c, 1, 1], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool(a.index()), &[a.index()])
    }

    /// `x[N,C,H,W] * gate[N,C,1,1]`, broadcast over space.
    pub fn mul_channel(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (_, _, hw) = channel_gate_dims("mul_channel", self.shape(x), self.shape(gate))?;
        let g = self.value(gate).data();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(g)
            .flat_map(|(plane, &gv)| plane.iter().map(move |&v| v * gv))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(
            "mul_channel",
            value,
            Op::MulChannel {
                x: x.index(),
                gate: gate.index(),
            },
            &[x.index(), gate.index()],
        )
    }

    /// `x[N,C,H,W] + bias[N,C,1,1]`, broadcast over space.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, _, hw) = channel_gate_dims("add_channel", self.shape(x), self.shape(bias))?;
        let g = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .chunks(hw)
            .zip(g)
            .flat_map(|(plane, &gv)| plane.iter().map(move |&v| v + gv))
            .collect();
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        self.push(
            "add_channel",
            value,
            Op::AddChannel {
                x: x.index(),
                bias: bias.index(),
            },
            &[x.index(), bias.index()],
        )
    }

    /// Concatenate `[N,Ci,H,W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let (n, _, h, w) = self.value(*first).dims4()?;
        let mut total = 0;
        for &p in parts {
            let (pn, pc, ph, pw) = self.value(p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape("concat", format!("{:?} vs {:?}", self.shape(*first), self.shape(p))));
            }
            total += pc;
        }
        let hw = h * w;
        let mut out = Vec::with_capacity(n * total * hw);
        for s in 0..n {
            for &p in parts {
                let pc = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[s * pc * hw..(s + 1) * pc * hw]);
            }
        }
        let value = Tensor::new([n, total, h, w], out)?;
        let idx: Vec<usize> = parts.iter().map(|p| p.index()).collect();
        self.push("concat", value, Op::Concat(idx.clone()), &idx)
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("{c} channels, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            ));
        }
        Ok((n, c, h * w))
    }

    /// Batch normalization with batch statistics. Also returns the batch
    /// mean and unbiased variance per channel for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let (n, c, hw) = self.bn_dims(x, gamma, beta)?;
        let m = n * hw;
        if m < 2 {
            return Err(Error::shape("batch_norm", "training mode needs more than one value per channel"));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut out = vec![T::ZERO; xv.len()];
        let mut inv_std = Vec::with_capacity(c);
        let mut means = Vec::with_capacity(c);
        let mut vars = Vec::with_capacity(c);
        let inv_m = T::from_f64(1.0 / m as f64);
        for ch in 0..c {
            let planes = || (0..n).map(move |s| (s * c + ch) * hw);
            let mut sum = T::ZERO;
            for b in planes() {
                sum += xv[b..b + hw].iter().copied().sum::<T>();
            }
            let mean = sum * inv_m;
            let mut sq = T::ZERO;
            for b in planes() {
                sq += xv[b..b + hw].iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
            }
            let var = sq * inv_m;
            let istd = T::ONE / (var + T::from_f64(eps)).sqrt();
            for b in planes() {
                for i in b..b + hw {
                    let xh = (xv[i] - mean) * istd;
                    xhat[i] = xh;
                    out[i] = gv[ch] * xh + bv[ch];
                }
            }
            inv_std.push(istd);
            means.push(mean.to_f64());
            vars.push(sq.to_f64() / (m - 1) as f64);
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let v = self.push(
            "batch_norm",
            value,
            Op::BatchNormTrain {
                x: x.index(),
                gamma: gamma.index(),
                beta: beta.index(),
                xhat,
                inv_std,
            },
            &[x.index(), gamma.index(), beta.index()],
        )?;
        Ok((v, means, vars))
    }

    /// Batch normalization with fixed statistics: a per-channel affine map.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, hw) = self.bn_dims(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + T::from_f64(eps)).sqrt()).collect();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut out = vec![T::ZERO; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let b = (s * c + ch) * hw;
                for i in b..b + hw {
                    out[i] = gv[ch] * ((xv[i] - mean[ch]) * inv_std[ch]) + bv[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "batch_norm",
            value,
            Op::BatchNormEval {
                x: x.index(),
                gamma: gamma.index(),
                beta: beta.index(),
                mean: mean.to_vec(),
                inv_std,
            },
            &[x.index(), gamma.index(), beta.index()],
        )
    }

    /// Binary cross-entropy against a constant target, in the stable
    /// logits form `max(x,0) − x·t + ln(1 + e^−|x|)`.
    pub fn bce_with_logits(&mut self, x: Var, target: f64, reduction: Reduction) -> Result<Var> {
        let t = T::from_f64(target);
        let xv = self.value(x);
        if xv.is_empty() {
            return Err(Error::shape("bce_with_logits", "empty input"));
        }
        if !xv.all_finite() {
            return Err(Error::NonFinite { op: "bce_with_logits" });
        }
        let scale = match reduction {
            Reduction::Mean => T::from_f64(1.0 / xv.len() as f64),
            Reduction::Sum => T::ONE,
        };
        let total: T = xv
            .data()
            .iter()
            .map(|&v| v.max(T::ZERO) - v * t + (-v.abs()).exp().ln_1p())
            .sum();
        let value = Tensor::scalar(total * scale);
        self.push(
            "bce_with_logits",
            value,
            Op::BceWithLogits {
                x: x.index(),
                target: t,
                scale,
            },
            &[x.index()],
        )
    }

    /// Negative log-likelihood of `logp[N,C,H,W]` at `labels[N,H,W]`,
    /// skipping pixels equal to `ignore`.
    pub fn nll(&mut self, logp: Var, labels: &[u8], ignore: u8, reduction: Reduction) -> Result<Var> {
        let (n, c, h, w) = self.value(logp).dims4()?;
        let hw = h * w;
        if labels.len() != n * hw {
            return Err(Error::shape("nll", format!("{} labels for {n}x{h}x{w}", labels.len())));
        }
        let lp = self.value(logp).data();
        let mut total = T::ZERO;
        let mut count = 0usize;
        for (i, &l) in labels.iter().enumerate() {
            if l == ignore {
                continue;
            }
            if l as usize >= c {
                return Err(Error::Invalid(format!("label {l} out of range for {c} classes")));
            }
            let (s, p) = (i / hw, i % hw);
            total += lp[(s * c + l as usize) * hw + p];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Invalid("every pixel carries the ignore label".into()));
        }
        let scale = match reduction {
            Reduction::Mean => T::from_f64(1.0 / count as f64),
            Reduction::Sum => T::ONE,
        };
        let value = Tensor::scalar(-total * scale);
        self.push(
            "nll",
            value,
            Op::Nll {
                logp: logp.index(),
                labels: labels.to_vec(),
                ignore,
                scale,
            },
            &[logp.index()],
        )
    }

    /// Vector-Jacobian product of node `i` given its output gradient.
    pub(crate) fn backprop_node(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = self.node(i);
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, win, cols } => {
                let (n, cout, _, _) = out.dims4()?;
                let area = win.out_area();
                let patch = win.channels * win.kernel * win.kernel;
                let in_len = win.channels * win.height * win.width;
                if let Some(b) = *b {
                    if self.wants_grad(b) {
                        let mut gb = vec![T::ZERO; cout];
                        for s in 0..n {
                            for (co, acc) in gb.iter_mut().enumerate() {
                                *acc += gd[(s * cout + co) * area..(s * cout + co + 1) * area].iter().copied().sum::<T>();
                            }
                        }
                        self.accumulate(grads, b, Tensor::new([cout], gb)?)?;
                    }
                }
                if self.wants_grad(*w) {
                    let mut gw = vec![T::ZERO; cout * patch];
                    let xv = self.node(*x).value.data();
                    for s in 0..n {
                        let src: &[T] = if win.is_pointwise() {
                            &xv[s * in_len..(s + 1) * in_len]
                        } else {
                            &cols[s]
                        };
                        kernels::gemm_nt_acc(cout, area, patch, &gd[s * cout * area..(s + 1) * cout * area], src, &mut gw);
                    }
                    let shape = self.node(*w).value.shape().to_vec();
                    self.accumulate(grads, *w, Tensor::new(shape, gw)?)?;
                }
                if self.wants_grad(*x) {
                    let wt = kernels::transpose(cout, patch, self.node(*w).value.data());
                    let mut gx = vec![T::ZERO; n * in_len];
                    for s in 0..n {
                        let go = &gd[s * cout * area..(s + 1) * cout * area];
                        let dst = &mut gx[s * in_len..(s + 1) * in_len];
                        if win.is_pointwise() {
                            kernels::gemm_acc(patch, cout, area, &wt, go, dst);
                        } else {
                            let mut dcols = vec![T::ZERO; patch * area];
                            kernels::gemm_acc(patch, cout, area, &wt, go, &mut dcols);
                            kernels::col2im_acc(win, &dcols, dst);
                        }
                    }
                    let shape = self.node(*x).value.shape().to_vec();
                    self.accumulate(grads, *x, Tensor::new(shape, gx)?)?;
                }
            }
            Op::Depthwise { x, w, b, win, padded } => {
                let (n, c, _, _) = out.dims4()?;
                let area = win.out_area();
                let in_len = c * win.height * win.width;
                let padded_len = c * (win.height + 2 * win.pad) * (win.width + 2 * win.pad);
                if let Some(b) = *b {
                    if self.wants_grad(b) {
                        let mut gb = vec![T::ZERO; c];
                        for s in 0..n {
                            for (ch, acc) in gb.iter_mut().enumerate() {
                                *acc += gd[(s * c + ch) * area..(s * c + ch + 1) * area].iter().copied().sum::<T>();
                            }
                        }
                        self.accumulate(grads, b, Tensor::new([c], gb)?)?;
                    }
                }
                let want_w = self.wants_grad(*w);
                let want_x = self.wants_grad(*x);
                if want_w || want_x {
                    let wv = self.node(*w).value.data();
                    let mut gw = vec![T::ZERO; wv.len()];
                    let mut gx = vec![T::ZERO; if want_x { n * in_len } else { 0 }];
                    for s in 0..n {
                        let go = &gd[s * c * area..(s + 1) * c * area];
                        let mut gpad = vec![T::ZERO; if want_x { padded_len } else { 0 }];
                        kernels::depthwise_backward(
                            win,
                            &padded[s],
                            wv,
                            go,
                            want_w.then_some(&mut gw[..]),
                            want_x.then_some(&mut gpad[..]),
                        );
                        if want_x {
                            kernels::unpad_acc(win, &gpad, &mut gx[s * in_len..(s + 1) * in_len]);
                        }
                    }
                    if want_w {
                        let shape = self.node(*w).value.shape().to_vec();
                        self.accumulate(grads, *w, Tensor::new(shape, gw)?)?;
                    }
                    if want_x {
                        let shape = self.node(*x).value.shape().to_vec();
                        self.accumulate(grads, *x, Tensor::new(shape, gx)?)?;
                    }
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::Mul(a, b) => {
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                if self.wants_grad(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&g, &q)| g * q).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?)?;
                }
                if self.wants_grad(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&g, &p)| g * p).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), d)?)?;
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|v| v * s))?;
            }
            Op::Ln(a) => {
                let av = &self.node(*a).value;
                let d = gd.iter().zip(av.data()).map(|(&g, &x)| g / x).collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?)?;
            }
            Op::Sigmoid(a) => {
                let d = gd.iter().zip(out.data()).map(|(&g, &y)| g * y * (T::ONE - y)).collect();
                self.accumulate(grads, *a, Tensor::new(out.shape().to_vec(), d)?)?;
            }
            Op::LeakyRelu(a, slope) => {
                let av = &self.node(*a).value;
                let d = gd
                    .iter()
                    .zip(av.data())
                    .map(|(&g, &x)| if x >= T::ZERO { g } else { g * *slope })
                    .collect();
                self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), d)?)?;
            }
            Op::Softmax(a) | Op::LogSoftmax(a) => {
                let (n, c, h, w) = out.dims4()?;
                let hw = h * w;
                let y = out.data();
                let is_log = matches!(node.op, Op::LogSoftmax(_));
                let mut d = vec![T::ZERO; y.len()];
                for s in 0..n {
                    let base = s * c * hw;
                    for p in 0..hw {
                        let idx = |ch: usize| base + ch * hw + p;
                        if is_log {
                            let total: T = (0..c).map(|ch| gd[idx(ch)]).sum();
                            for ch in 0..c {
                                d[idx(ch)] = gd[idx(ch)] - y[idx(ch)].exp() * total;
                            }
                        } else {
                            let dot: T = (0..c).map(|ch| gd[idx(ch)] * y[idx(ch)]).sum();
                            for ch in 0..c {
                                d[idx(ch)] = y[idx(ch)] * (gd[idx(ch)] - dot);
                            }
                        }
                    }
                }
                self.accumulate(grads, *a, Tensor::new([n, c, h, w], d)?)?;
            }
            Op::Upsample { x, taps_h, taps_w } => {
                let (n, c, h, w) = self.node(*x).value.dims4()?;
                let (_, _, oh, ow) = out.dims4()?;
                let mut d = vec![T::ZERO; n * c * h * w];
                for plane in 0..n * c {
                    let go = &gd[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut d[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..oh {
                        let fy = T::from_f64(taps_h.frac[oy]);
                        let (r0, r1) = (taps_h.lo[oy] * w, taps_h.hi[oy] * w);
                        for ox in 0..ow {
                            let fx = T::from_f64(taps_w.frac[ox]);
                            let (l, r) = (taps_w.lo[ox], taps_w.hi[ox]);
                            let gv = go[oy * ow + ox];
                            let gt = gv * (T::ONE - fy);
                            let gb = gv * fy;
                            dst[r0 + l] += gt * (T::ONE - fx);
                            dst[r0 + r] += gt * fx;
                            dst[r1 + l] += gb * (T::ONE - fx);
                            dst[r1 + r] += gb * fx;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([n, c, h, w], d)?)?;
            }
            Op::Sum(a) | Op::Mean(a) => {
                let shape = self.node(*a).value.shape().to_vec();
                let len = self.node(*a).value.len();
                let mut v = gd[0];
                if matches!(node.op, Op::Mean(_)) {
                    v = v / T::from_f64(len as f64);
                }
                self.accumulate(grads, *a, Tensor::full(shape, v))?;
            }
            Op::GlobalAvgPool(a) => {
                let (n, c, h, w) = self.node(*a).value.dims4()?;
                let hw = h * w;
                let inv = T::from_f64(1.0 / hw as f64);
                let mut d = vec![T::ZERO; n * c * hw];
                for (p, chunk) in d.chunks_mut(hw).enumerate() {
                    chunk.fill(gd[p] * inv);
                }
                self.accumulate(grads, *a, Tensor::new([n, c, h, w], d)?)?;
            }
            Op::MulChannel { x, gate } => {
                let xv = &self.node(*x).value;
                let gv = &self.node(*gate).value;
                let hw = xv.len() / gv.len();
                if self.wants_grad(*x) {
                    let d = gd
                        .chunks(hw)
                        .zip(gv.data())
                        .flat_map(|(plane, &s)| plane.iter().map(move |&v| v * s))
                        .collect();
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), d)?)?;
                }
                if self.wants_grad(*gate) {
                    let d = gd
                        .chunks(hw)
                        .zip(xv.data().chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum::<T>())
                        .collect();
                    self.accumulate(grads, *gate, Tensor::new(gv.shape().to_vec(), d)?)?;
                }
            }
            Op::AddChannel { x, bias } => {
                let bshape = self.node(*bias).value.shape().to_vec();
                let hw = gd.len() / self.node(*bias).value.len();
                self.accumulate(grads, *x, g.clone())?;
                if self.wants_grad(*bias) {
                    let d = gd.chunks(hw).map(|p| p.iter().copied().sum::<T>()).collect();
                    self.accumulate(grads, *bias, Tensor::new(bshape, d)?)?;
                }
            }
            Op::Concat(parts) => {
                let (n, total, h, w) = out.dims4()?;
                let hw = h * w;
                let mut offset = 0;
                for &p in parts {
                    let pc = self.node(p).value.shape()[1];
                    if self.wants_grad(p) {
                        let mut d = Vec::with_capacity(n * pc * hw);
                        for s in 0..n {
                            let start = (s * total + offset) * hw;
                            d.extend_from_slice(&gd[start..start + pc * hw]);
                        }
                        self.accumulate(grads, p, Tensor::new([n, pc, h, w], d)?)?;
                    }
                    offset += pc;
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, h, w) = out.dims4()?;
                let hw = h * w;
                let m = T::from_f64((n * hw) as f64);
                let gamma_v = self.node(*gamma).value.data();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                for ch in 0..c {
                    for s in 0..n {
                        let b = (s * c + ch) * hw;
                        for i in b..b + hw {
                            dbeta[ch] += gd[i];
                            dgamma[ch] += gd[i] * xhat[i];
                        }
                    }
                }
                if self.wants_grad(*x) {
                    let mut dx = vec![T::ZERO; gd.len()];
                    for ch in 0..c {
                        // dxhat = g·gamma; sums over the channel reuse dbeta/dgamma.
                        let sum_dxhat = dbeta[ch] * gamma_v[ch];
                        let sum_dxhat_xhat = dgamma[ch] * gamma_v[ch];
                        let k = inv_std[ch] / m;
                        for s in 0..n {
                            let b = (s * c + ch) * hw;
                            for i in b..b + hw {
                                let dxh = gd[i] * gamma_v[ch];
                                dx[i] = k * (m * dxh - sum_dxhat - xhat[i] * sum_dxhat_xhat);
                            }
                        }
                    }
                    self.accumulate(grads, *x, Tensor::new([n, c, h, w], dx)?)?;
                }
                self.accumulate(grads, *gamma, Tensor::new([c], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::new([c], dbeta)?)?;
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
            } => {
                let (n, c, h, w) = out.dims4()?;
                let hw = h * w;
                let xv = self.node(*x).value.data();
                let gamma_v = self.node(*gamma).value.data();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                let mut dx = vec![T::ZERO; gd.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let b = (s * c + ch) * hw;
                        for i in b..b + hw {
                            dbeta[ch] += gd[i];
                            dgamma[ch] += gd[i] * ((xv[i] - mean[ch]) * inv_std[ch]);
                            dx[i] = gd[i] * gamma_v[ch] * inv_std[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new([n, c, h, w], dx)?)?;
                self.accumulate(grads, *gamma, Tensor::new([c], dgamma)?)?;
                self.accumulate(grads, *beta, Tensor::new([c], dbeta)?)?;
            }
            Op::BceWithLogits { x, target, scale } => {
                let xv = &self.node(*x).value;
                let k = gd[0] * *scale;
                let d = xv.map(|v| (sigmoid(v) - *target) * k);
                self.accumulate(grads, *x, d)?;
            }
            Op::Nll {
                logp,
                labels,
                ignore,
                scale,
            } => {
                let lp = &self.node(*logp).value;
                let (n, c, h, w) = lp.dims4()?;
                let hw = h * w;
                let mut d = vec![T::ZERO; lp.len()];
                let k = -gd[0] * *scale;
                for (i, &l) in labels.iter().enumerate() {
                    if l == *ignore {
                        continue;
                    }
                    let (s, p) = (i / hw, i % hw);
                    d[(s * c + l as usize) * hw + p] = k;
                }
                self.accumulate(grads, *logp, Tensor::new([n, c, h, w], d)?)?;
            }
        }
        Ok(())
    }
}
