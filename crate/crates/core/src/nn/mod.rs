//! Parameterized layers, the model graph and initialization.

mod graph;
mod layers;
mod param;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::real::Real;
use crate::tensor::Tensor;

pub use graph::{GraphNode, Layer, ModelGraph, NodeId};
pub use layers::{BatchNormLayer, ConvLayer, DSConvLayer};
pub use param::{ParamEntry, ParamKind, ParamStore};

/// Whether batch normalization uses batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

fn normal_fill<T: Real, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(dist.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product")
}

/// Kaiming-normal weights (`std = sqrt(2 / fan_in)`), zero biases,
/// batch-norm scale 1 and shift 0, visiting layers in graph order.
pub fn init_kaiming<T: Real, R: Rng>(graph: &mut ModelGraph<T>, rng: &mut R) {
    let layers: Vec<Layer> = graph.nodes().iter().map(|n| n.layer.clone()).collect();
    let store = graph.store_mut();
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                let shape = store.value(c.weight).shape().to_vec();
                store.set_value(c.weight, normal_fill(rng, &shape, c.fan_in())).expect("same shape");
                store.value_mut(c.bias).fill(T::ZERO);
            }
            Layer::DSConv(c) => {
                let shape = store.value(c.dw_weight).shape().to_vec();
                store
                    .set_value(c.dw_weight, normal_fill(rng, &shape, c.kernel * c.kernel))
                    .expect("same shape");
                let shape = store.value(c.pw_weight).shape().to_vec();
                store.set_value(c.pw_weight, normal_fill(rng, &shape, c.in_channels)).expect("same shape");
                store.value_mut(c.dw_bias).fill(T::ZERO);
                store.value_mut(c.pw_bias).fill(T::ZERO);
            }
            Layer::BatchNorm(b) => {
                store.value_mut(b.gamma).fill(T::ONE);
                store.value_mut(b.beta).fill(T::ZERO);
            }
            _ => {}
        }
    }
}

/// Make the last parameterized layer output exactly zero. A separable
/// layer keeps its depthwise weights: zeroing both factors would leave every
/// gradient of the layer at zero.
pub fn zero_final_layer<T: Real>(graph: &mut ModelGraph<T>) {
    let Some(last) = graph.nodes().iter().rev().find(|n| n.layer.num_params() > 0).map(|n| n.layer.clone()) else {
        return;
    };
    let ids = match last {
        Layer::Conv(c) => vec![c.weight, c.bias],
        Layer::DSConv(c) => vec![c.dw_bias, c.pw_weight, c.pw_bias],
        Layer::BatchNorm(b) => vec![b.gamma, b.beta],
        _ => vec![],
    };
    for i in ids {
        graph.store_mut().value_mut(i).fill(T::ZERO);
    }
}
