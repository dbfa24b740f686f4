//! Reduced two-path segmentation network.
//!
//! Spatial path: three stride-2 3×3 conv-BN-ReLU blocks down to 1/8 scale.
//! Context path: a stride-2 stem, a stage down to 1/16 and a stage down to
//! 1/32, each refined by channel attention, plus a global-context tail.
//! Both paths meet in a feature-fusion block at 1/8 scale; a 1×1 classifier
//! is resized back to the input resolution.

use crate::error::{Error, Result};
use crate::nn::{Layer, ModelGraph, NodeId};
use crate::real::Real;

/// Base channel widths before applying the width multiplier.
pub const SPATIAL_CHANNELS: [usize; 3] = [16, 32, 64];
pub const STEM_CHANNELS: usize = 16;
pub const STAGE16_CHANNELS: [usize; 3] = [32, 64, 64];
pub const STAGE32_CHANNELS: usize = 128;
pub const FUSION_CHANNELS: usize = 64;
pub const FUSION_REDUCTION: usize = 4;
pub const IMAGE_CHANNELS: usize = 3;
pub const TOTAL_STRIDE: usize = 32;

/// `ceil(c · m)` rounded up to a multiple of 4.
pub fn scaled(c: usize, width_multiplier: f64) -> usize {
    let raw = (c as f64 * width_multiplier).ceil() as usize;
    raw.div_ceil(4).max(1) * 4
}

fn conv_bn_relu<T: Real>(g: &mut ModelGraph<T>, name: &str, cin: usize, cout: usize, k: usize, stride: usize, from: NodeId) -> Result<NodeId> {
    let c = g.add_conv(&format!("{name}.conv"), cin, cout, k, stride, k / 2, from)?;
    let b = g.add_batch_norm(&format!("{name}.bn"), cout, c)?;
    g.push(format!("{name}.relu"), Layer::Relu, &[b])
}

/// Channel attention: global pool → 1×1 conv → sigmoid gate.
fn attention_refine<T: Real>(g: &mut ModelGraph<T>, name: &str, channels: usize, from: NodeId) -> Result<NodeId> {
    let pool = g.push(format!("{name}.pool"), Layer::GlobalAvgPool, &[from])?;
    let conv = g.add_conv(&format!("{name}.conv"), channels, channels, 1, 1, 0, pool)?;
    let gate = g.push(format!("{name}.sigmoid"), Layer::Sigmoid, &[conv])?;
    g.push(format!("{name}.gate"), Layer::MulChannel, &[from, gate])
}

/// Build the two-path network for `num_classes` output classes.
pub fn build_mini_bisenet<T: Real>(num_classes: usize, width_multiplier: f64) -> Result<ModelGraph<T>> {
    if num_classes < 2 {
        return Err(Error::Invalid(format!("segmentation needs at least 2 classes, got {num_classes}")));
    }
    if !(width_multiplier > 0.0 && width_multiplier.is_finite()) {
        return Err(Error::Invalid(format!("width multiplier must be positive, got {width_multiplier}")));
    }
    let w = |c| scaled(c, width_multiplier);
    let mut g = ModelGraph::new(IMAGE_CHANNELS);
    let input = 0;

    // Spatial path, 1/8 scale.
    let mut x = input;
    let mut cin = IMAGE_CHANNELS;
    for (i, &c) in SPATIAL_CHANNELS.iter().enumerate() {
        x = conv_bn_relu(&mut g, &format!("spatial{}", i + 1), cin, w(c), 3, 2, x)?;
        cin = w(c);
    }
    let spatial = x;
    let spatial_ch = cin;

    // Context path.
    let mut x = conv_bn_relu(&mut g, "context.stem", IMAGE_CHANNELS, w(STEM_CHANNELS), 3, 2, input)?;
    let mut cin = w(STEM_CHANNELS);
    for (i, &c) in STAGE16_CHANNELS.iter().enumerate() {
        x = conv_bn_relu(&mut g, &format!("context.stage16.{}", i + 1), cin, w(c), 3, 2, x)?;
        cin = w(c);
    }
    let stage16 = x;
    let c16 = cin;
    let c32 = w(STAGE32_CHANNELS);
    let stage32 = conv_bn_relu(&mut g, "context.stage32", c16, c32, 3, 2, stage16)?;

    let arm16 = attention_refine(&mut g, "context.arm16", c16, stage16)?;
    let arm32 = attention_refine(&mut g, "context.arm32", c32, stage32)?;
    let tail = g.push("context.tail.pool", Layer::GlobalAvgPool, &[stage32])?;
    let top = g.push("context.tail.add", Layer::AddChannel, &[arm32, tail])?;
    let up32 = g.push("context.up32", Layer::ResizeLike, &[top, stage16])?;
    let head32 = conv_bn_relu(&mut g, "context.head32", c32, c16, 1, 1, up32)?;
    let merged = g.push("context.merge", Layer::Add, &[arm16, head32])?;
    let context = g.push("context.up16", Layer::ResizeLike, &[merged, spatial])?;

    // Feature fusion.
    let cat = g.push("fusion.concat", Layer::Concat, &[spatial, context])?;
    let cf = w(FUSION_CHANNELS);
    let fused = conv_bn_relu(&mut g, "fusion.block", spatial_ch + c16, cf, 1, 1, cat)?;
    let pool = g.push("fusion.pool", Layer::GlobalAvgPool, &[fused])?;
    let squeeze = (cf / FUSION_REDUCTION).max(1);
    let a1 = g.add_conv("fusion.attn1", cf, squeeze, 1, 1, 0, pool)?;
    let a1 = g.push("fusion.attn1.relu", Layer::Relu, &[a1])?;
    let a2 = g.add_conv("fusion.attn2", squeeze, cf, 1, 1, 0, a1)?;
    let gate = g.push("fusion.attn2.sigmoid", Layer::Sigmoid, &[a2])?;
    let gated = g.push("fusion.gate", Layer::MulChannel, &[fused, gate])?;
    let feat = g.push("fusion.residual", Layer::Add, &[fused, gated])?;

    let logits = g.add_conv("classifier", cf, num_classes, 1, 1, 0, feat)?;
    g.push("upsample", Layer::ResizeLike, &[logits, input])?;
    Ok(g)
}
