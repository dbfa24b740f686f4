use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::real::Real;
use crate::tensor::Tensor;

use super::param::{ParamKind, ParamStore};

/// Standard convolution with bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub weight: usize,
    pub bias: usize,
}

impl ConvLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::zeros([out_channels, in_channels, kernel, kernel]),
            ParamKind::Trainable,
        )?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros([out_channels]), ParamKind::Trainable)?;
        Ok(ConvLayer {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            weight,
            bias,
        })
    }

    pub fn num_params(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = store.bind(tape, self.weight);
        let b = store.bind(tape, self.bias);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Depthwise `k×k` convolution (stride/pad here) followed by a `1×1`
/// pointwise convolution; both stages carry a bias.
#[derive(Debug, Clone, PartialEq)]
pub struct DSConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub dw_weight: usize,
    pub dw_bias: usize,
    pub pw_weight: usize,
    pub pw_bias: usize,
}

impl DSConvLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let dw_weight = store.add(
            format!("{name}.dw.weight"),
            Tensor::zeros([in_channels, 1, kernel, kernel]),
            ParamKind::Trainable,
        )?;
        let dw_bias = store.add(format!("{name}.dw.bias"), Tensor::zeros([in_channels]), ParamKind::Trainable)?;
        let pw_weight = store.add(
            format!("{name}.pw.weight"),
            Tensor::zeros([out_channels, in_channels, 1, 1]),
            ParamKind::Trainable,
        )?;
        let pw_bias = store.add(format!("{name}.pw.bias"), Tensor::zeros([out_channels]), ParamKind::Trainable)?;
        Ok(DSConvLayer {
            in_channels,
            out_channels,
            kernel,
            stride,
            pad,
            dw_weight,
            dw_bias,
            pw_weight,
            pw_bias,
        })
    }

    pub fn num_params(&self) -> usize {
        let (c, k) = (self.in_channels, self.kernel);
        c * k * k + c + c * self.out_channels + self.out_channels
    }

    pub fn forward<T: Real>(&self, store: &ParamStore<T>, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let dw = store.bind(tape, self.dw_weight);
        let db = store.bind(tape, self.dw_bias);
        let h = tape.depthwise_conv2d(x, dw, Some(db), self.stride, self.pad)?;
        let pw = store.bind(tape, self.pw_weight);
        let pb = store.bind(tape, self.pw_bias);
        tape.conv2d(h, pw, Some(pb), 1, 0)
    }
}

/// Per-channel batch normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: usize,
    pub beta: usize,
    pub running_mean: usize,
    pub running_var: usize,
}

impl BatchNormLayer {
    pub const EPS: f64 = 1e-5;
    pub const MOMENTUM: f64 = 0.1;

    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full([channels], T::ONE), ParamKind::Trainable)?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([channels]), ParamKind::Trainable)?;
        let running_mean = store.add(format!("{name}.running_mean"), Tensor::zeros([channels]), ParamKind::Buffer)?;
        let running_var = store.add(
            format!("{name}.running_var"),
            Tensor::full([channels], T::ONE),
            ParamKind::Buffer,
        )?;
        Ok(BatchNormLayer {
            channels,
            eps: Self::EPS,
            momentum: Self::MOMENTUM,
            gamma,
            beta,
            running_mean,
            running_var,
        })
    }

    pub fn num_params(&self) -> usize {
        2 * self.channels
    }

    /// Training mode normalizes with batch statistics and folds them into
    /// the running estimates; eval mode uses the running estimates only.
    pub fn forward<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        tape: &mut Tape<T>,
        x: Var,
        mode: super::Mode,
    ) -> Result<Var> {
        let g = store.bind(tape, self.gamma);
        let b = store.bind(tape, self.beta);
        match mode {
            super::Mode::Train => {
                let (y, mean, var) = tape.batch_norm_train(x, g, b, self.eps)?;
                let m = T::from_f64(self.momentum);
                let keep = T::ONE - m;
                let rm = store.value_mut(self.running_mean);
                for (r, &v) in rm.data_mut().iter_mut().zip(&mean) {
                    *r = keep * *r + m * T::from_f64(v);
                }
                let rv = store.value_mut(self.running_var);
                for (r, &v) in rv.data_mut().iter_mut().zip(&var) {
                    *r = keep * *r + m * T::from_f64(v);
                }
                Ok(y)
            }
            super::Mode::Eval => {
                let mean = store.value(self.running_mean).data().to_vec();
                let var = store.value(self.running_var).data().to_vec();
                tape.batch_norm_eval(x, g, b, &mean, &var, self.eps)
            }
        }
    }
}
