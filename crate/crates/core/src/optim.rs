//! Momentum SGD with classic (gradient-added) weight decay, and Adam with
//! bias correction. Both read gradients from a [`ParamStore`] and update its
//! trainable tensors in place.

use crate::error::{Error, Result};
use crate::nn::{ParamKind, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

fn trainable<T: Real>(store: &ParamStore<T>) -> Vec<usize> {
    (0..store.len())
        .filter(|&i| store.entry(i).kind == ParamKind::Trainable)
        .collect()
}

fn check_shapes<T: Real>(store: &ParamStore<T>, ids: &[usize], bufs: &[Tensor<T>], what: &str) -> Result<()> {
    if ids.len() != bufs.len() {
        return Err(Error::shape("optimizer", format!("{what}: {} buffers for {} parameters", bufs.len(), ids.len())));
    }
    for (&i, b) in ids.iter().zip(bufs) {
        if store.value(i).shape() != b.shape() {
            return Err(Error::shape(
                "optimizer",
                format!("{what} buffer {:?} for '{}' {:?}", b.shape(), store.entry(i).name, store.value(i).shape()),
            ));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sgd<T> {
    pub momentum: f64,
    pub weight_decay: f64,
    /// One buffer per trainable parameter, in store order.
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(store: &ParamStore<T>, momentum: f64, weight_decay: f64) -> Self {
        let velocity = trainable(store)
            .into_iter()
            .map(|i| Tensor::zeros(store.value(i).shape().to_vec()))
            .collect();
        Sgd {
            momentum,
            weight_decay,
            velocity,
        }
    }

    /// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let ids = trainable(store);
        check_shapes(store, &ids, &self.velocity, "momentum")?;
        let (mu, wd, lr) = (T::from_f64(self.momentum), T::from_f64(self.weight_decay), T::from_f64(lr));
        for (&i, v) in ids.iter().zip(&mut self.velocity) {
            let g = store.grad(i).data().to_vec();
            let theta = store.value_mut(i);
            for ((p, vel), &gr) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(&g) {
                let d = gr + wd * *p;
                *vel = mu * *vel + d;
                *p = *p - lr * *vel;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(store: &ParamStore<T>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Tensor<T>> = trainable(store)
            .into_iter()
            .map(|i| Tensor::zeros(store.value(i).shape().to_vec()))
            .collect();
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, lr: f64) -> Result<()> {
        let ids = trainable(store);
        check_shapes(store, &ids, &self.m, "first moment")?;
        check_shapes(store, &ids, &self.v, "second moment")?;
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::from_f64(self.beta1), T::from_f64(self.beta2));
        let (one_b1, one_b2) = (T::ONE - b1, T::ONE - b2);
        let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
        let (lr, eps) = (T::from_f64(lr), T::from_f64(self.eps));
        for ((&i, m), v) in ids.iter().zip(&mut self.m).zip(&mut self.v) {
            let g = store.grad(i).data().to_vec();
            let theta = store.value_mut(i);
            for (((p, mi), vi), &gr) in theta.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(&g) {
                *mi = b1 * *mi + one_b1 * gr;
                *vi = b2 * *vi + one_b2 * gr * gr;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *p = *p - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
