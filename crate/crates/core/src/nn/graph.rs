use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;

use super::layers::{BatchNormLayer, ConvLayer, DSConvLayer};
use super::param::ParamStore;
use super::Mode;

/// Index of a node inside a [`ModelGraph`]. Node 0 is the graph input.
pub type NodeId = usize;

/// One operation of the model graph.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Input,
    Conv(ConvLayer),
    DSConv(DSConvLayer),
    BatchNorm(BatchNormLayer),
    LeakyRelu(f64),
    Relu,
    Sigmoid,
    GlobalAvgPool,
    /// Elementwise sum of two same-shape inputs.
    Add,
    /// First input scaled by a `[N,C,1,1]` second input.
    MulChannel,
    /// First input shifted by a `[N,C,1,1]` second input.
    AddChannel,
    /// Channel concatenation of all inputs.
    Concat,
    /// Bilinear resize of the first input to the spatial size of the second.
    ResizeLike,
}

impl Layer {
    pub fn arity(&self) -> Option<usize> {
        match self {
            Layer::Input => Some(0),
            Layer::Add | Layer::MulChannel | Layer::AddChannel | Layer::ResizeLike => Some(2),
            Layer::Concat => None,
            _ => Some(1),
        }
    }

    pub fn num_params(&self) -> usize {
        match self {
            Layer::Conv(c) => c.num_params(),
            Layer::DSConv(c) => c.num_params(),
            Layer::BatchNorm(b) => b.num_params(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    pub name: String,
    pub layer: Layer,
    pub inputs: Vec<NodeId>,
}

/// A DAG of layers evaluated in insertion order, together with the
/// parameter registry the layers index into. The last node is the output.
#[derive(Debug)]
pub struct ModelGraph<T> {
    in_channels: usize,
    nodes: Vec<GraphNode>,
    store: ParamStore<T>,
}

impl<T: Real> Clone for ModelGraph<T> {
    fn clone(&self) -> Self {
        ModelGraph {
            in_channels: self.in_channels,
            nodes: self.nodes.clone(),
            store: self.store.clone(),
        }
    }
}

impl<T: Real> ModelGraph<T> {
    pub fn new(in_channels: usize) -> Self {
        ModelGraph {
            in_channels,
            nodes: vec![GraphNode {
                name: "input".into(),
                layer: Layer::Input,
                inputs: vec![],
            }],
            store: ParamStore::new(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn output(&self) -> NodeId {
        self.nodes.len() - 1
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Append a node reading from `inputs`.
    pub fn push(&mut self, name: impl Into<String>, layer: Layer, inputs: &[NodeId]) -> Result<NodeId> {
        let name = name.into();
        if let Some(a) = layer.arity() {
            if a != inputs.len() {
                return Err(Error::Invalid(format!("layer '{name}' takes {a} inputs, got {}", inputs.len())));
            }
        } else if inputs.is_empty() {
            return Err(Error::Invalid(format!("layer '{name}' needs at least one input")));
        }
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::Invalid(format!("layer '{name}' reads undefined node {bad}")));
        }
        if self.nodes.iter().any(|n| n.name == name) {
            return Err(Error::Invalid(format!("duplicate layer name '{name}'")));
        }
        self.nodes.push(GraphNode {
            name,
            layer,
            inputs: inputs.to_vec(),
        });
        Ok(self.nodes.len() - 1)
    }

    /// Append a node reading from the current output.
    pub fn then(&mut self, name: impl Into<String>, layer: Layer) -> Result<NodeId> {
        let last = self.output();
        self.push(name, layer, &[last])
    }

    pub fn add_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, from: NodeId) -> Result<NodeId> {
        let layer = ConvLayer::new(&mut self.store, name, cin, cout, k, stride, pad)?;
        self.push(name, Layer::Conv(layer), &[from])
    }

    pub fn add_dsconv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, from: NodeId) -> Result<NodeId> {
        let layer = DSConvLayer::new(&mut self.store, name, cin, cout, k, stride, pad)?;
        self.push(name, Layer::DSConv(layer), &[from])
    }

    pub fn add_batch_norm(&mut self, name: &str, channels: usize, from: NodeId) -> Result<NodeId> {
        let layer = BatchNormLayer::new(&mut self.store, name, channels)?;
        self.push(name, Layer::BatchNorm(layer), &[from])
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    /// Evaluate the graph on `x`. In training mode batch-norm running
    /// statistics are updated in place.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let shape = tape.shape(x);
        if shape.len() != 4 || shape[1] != self.in_channels {
            return Err(Error::Layer {
                layer: "input".into(),
                source: Box::new(Error::shape(
                    "forward",
                    format!("expected [N,{},H,W], got {shape:?}", self.in_channels),
                )),
            });
        }
        let mut vars: Vec<Var> = Vec::with_capacity(self.nodes.len());
        vars.push(x);
        for i in 1..self.nodes.len() {
            let node = &self.nodes[i];
            let ins: Vec<Var> = node.inputs.iter().map(|&j| vars[j]).collect();
            let out = eval_layer(&node.layer, &mut self.store, tape, &ins, mode).map_err(|e| Error::Layer {
                layer: node.name.clone(),
                source: Box::new(e),
            })?;
            vars.push(out);
        }
        Ok(*vars.last().expect("input node"))
    }

    /// Forward pass in eval mode without recording gradients.
    pub fn infer(&mut self, x: crate::tensor::Tensor<T>) -> Result<crate::tensor::Tensor<T>> {
        let frozen = self.store.is_frozen();
        self.store.set_frozen(true);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = self.forward(&mut tape, xv, Mode::Eval);
        self.store.set_frozen(frozen);
        Ok(tape.value(out?).clone())
    }
}

fn eval_layer<T: Real>(layer: &Layer, store: &mut ParamStore<T>, tape: &mut Tape<T>, ins: &[Var], mode: Mode) -> Result<Var> {
    match layer {
        Layer::Input => Ok(ins[0]),
        Layer::Conv(c) => c.forward(store, tape, ins[0]),
        Layer::DSConv(c) => c.forward(store, tape, ins[0]),
        Layer::BatchNorm(b) => b.forward(store, tape, ins[0], mode),
        Layer::LeakyRelu(slope) => tape.leaky_relu(ins[0], *slope),
        Layer::Relu => tape.relu(ins[0]),
        Layer::Sigmoid => tape.sigmoid(ins[0]),
        Layer::GlobalAvgPool => tape.global_avg_pool(ins[0]),
        Layer::Add => tape.add(ins[0], ins[1]),
        Layer::MulChannel => tape.mul_channel(ins[0], ins[1]),
        Layer::AddChannel => tape.add_channel(ins[0], ins[1]),
        Layer::Concat => tape.concat_channels(ins),
        Layer::ResizeLike => {
            let target = tape.shape(ins[1]);
            let (h, w) = (target[2], target[3]);
            let src = tape.shape(ins[0]);
            if src[2] == h && src[3] == w {
                Ok(ins[0])
            } else {
                tape.upsample_bilinear(ins[0], h, w)
            }
        }
    }
}
