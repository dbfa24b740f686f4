//! Analytical parameter and FLOP accounting.
//!
//! Only convolutions contribute MACs: `k²·Cin·Cout·H'·W'` for a standard
//! convolution, `k²·C·H'·W' + Cin·Cout·H'·W'` for a depthwise-separable one.
//! Bias, normalization and activation work is excluded; FLOPs = 2·MACs.

use std::fmt;

use crate::error::{Error, Result};
use crate::kernels::conv_out_len;
use crate::nn::{Layer, ModelGraph};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub layer: String,
    pub params: u64,
    pub macs: u64,
}

impl CostRow {
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub rows: Vec<CostRow>,
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_macs(&self) -> u64 {
        self.rows.iter().map(|r| r.macs).sum()
    }

    pub fn total_flops(&self) -> u64 {
        2 * self.total_macs()
    }

    /// `layer,params,macs,flops` rows followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,params,macs,flops\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.layer, r.params, r.macs, r.flops()));
        }
        s.push_str(&format!(
            "total,{},{},{}\n",
            self.total_params(),
            self.total_macs(),
            self.total_flops()
        ));
        s
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input {}x{}x{}", self.in_channels, self.height, self.width)?;
        writeln!(f, "{:<28} {:>12} {:>16} {:>16}", "layer", "params", "MACs", "FLOPs")?;
        for r in &self.rows {
            writeln!(f, "{:<28} {:>12} {:>16} {:>16}", r.layer, r.params, r.macs, r.flops())?;
        }
        writeln!(
            f,
            "{:<28} {:>12} {:>16} {:>16}",
            "total",
            self.total_params(),
            self.total_macs(),
            self.total_flops()
        )?;
        write!(
            f,
            "params {}  FLOPs {:.3}G",
            human_count(self.total_params()),
            self.total_flops() as f64 / 1e9
        )
    }
}

/// Three-decimal rendering in the K/M/G style of published cost tables.
pub fn human_count(n: u64) -> String {
    let v = n as f64;
    if v >= 1e9 {
        format!("{:.3}G", v / 1e9)
    } else if v >= 1e6 {
        format!("{:.3}M", v / 1e6)
    } else if v >= 1e3 {
        format!("{:.3}K", v / 1e3)
    } else {
        n.to_string()
    }
}

fn strided(name: &str, len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let out = conv_out_len(len, k, stride, pad);
    match out {
        Some(o) if len % stride == 0 && o == len / stride => Ok(o),
        _ => Err(Error::Invalid(format!(
            "resolution {len} does not propagate exactly through '{name}' (k={k}, s={stride}, p={pad})"
        ))),
    }
}

/// Propagate a `height × width` input through `graph` and account every
/// parameterized layer.
pub fn count_flops<T: Real>(graph: &ModelGraph<T>, height: usize, width: usize) -> Result<CostReport> {
    let mut dims: Vec<(usize, usize, usize)> = Vec::with_capacity(graph.nodes().len());
    let mut rows = Vec::new();
    for node in graph.nodes() {
        let input = |i: usize| dims[node.inputs[i]];
        let d = match &node.layer {
            Layer::Input => (graph.in_channels(), height, width),
            Layer::Conv(c) => {
                let (cin, h, w) = input(0);
                if cin != c.in_channels {
                    return Err(Error::shape("count_flops", format!("'{}' expects {} channels, got {cin}", node.name, c.in_channels)));
                }
                let oh = strided(&node.name, h, c.kernel, c.stride, c.pad)?;
                let ow = strided(&node.name, w, c.kernel, c.stride, c.pad)?;
                let macs = (c.kernel * c.kernel * c.in_channels * c.out_channels * oh * ow) as u64;
                rows.push(CostRow {
                    layer: node.name.clone(),
                    params: c.num_params() as u64,
                    macs,
                });
                (c.out_channels, oh, ow)
            }
            Layer::DSConv(c) => {
                let (cin, h, w) = input(0);
                if cin != c.in_channels {
                    return Err(Error::shape("count_flops", format!("'{}' expects {} channels, got {cin}", node.name, c.in_channels)));
                }
                let oh = strided(&node.name, h, c.kernel, c.stride, c.pad)?;
                let ow = strided(&node.name, w, c.kernel, c.stride, c.pad)?;
                let area = oh * ow;
                let macs = (c.kernel * c.kernel * c.in_channels * area + c.in_channels * c.out_channels * area) as u64;
                rows.push(CostRow {
                    layer: node.name.clone(),
                    params: c.num_params() as u64,
                    macs,
                });
                (c.out_channels, oh, ow)
            }
            Layer::BatchNorm(b) => {
                rows.push(CostRow {
                    layer: node.name.clone(),
                    params: b.num_params() as u64,
                    macs: 0,
                });
                input(0)
            }
            Layer::GlobalAvgPool => (input(0).0, 1, 1),
            Layer::Concat => {
                let (_, h, w) = input(0);
                (node.inputs.iter().map(|&i| dims[i].0).sum(), h, w)
            }
            Layer::ResizeLike => {
                let (c, _, _) = input(0);
                let (_, h, w) = input(1);
                (c, h, w)
            }
            Layer::LeakyRelu(_)
            | Layer::Relu
            | Layer::Sigmoid
            | Layer::Add
            | Layer::MulChannel
            | Layer::AddChannel => input(0),
        };
        dims.push(d);
    }
    Ok(CostReport {
        height,
        width,
        in_channels: graph.in_channels(),
        rows,
    })
}
