//! Side-by-side runs of the three discriminators against a source-only
//! baseline.

use std::fmt::Write as _;

use super::{run_training_on, TrainConfig, TrainData};
use crate::error::Result;
use crate::models::{build_discriminator, count_flops, DiscriminatorVariant};

/// Input extents the FLOP column is reported at (C × H × W of a full-size
/// softmax map).
pub const REPORT_INPUT: (usize, usize, usize) = (19, 512, 1024);

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    /// `None` for the source-only (λ = 0) baseline.
    pub variant: Option<DiscriminatorVariant>,
    pub params: u64,
    pub flops: u64,
    pub target_miou: f64,
}

/// Trains one source-only baseline plus one adversarial run per variant,
/// all from `config` with only the discriminator switched.
pub fn compare_variants(config: &TrainConfig, variants: &[DiscriminatorVariant], data: &TrainData) -> Result<Vec<VariantResult>> {
    let mut rows = Vec::new();
    let mut base = config.clone();
    base.lambda_adv = 0.0;
    base.out_dir = None;
    base.resume = None;
    let mut tr = run_training_on(&base, data)?;
    rows.push(VariantResult {
        variant: None,
        params: 0,
        flops: 0,
        target_miou: tr.evaluate(&data.eval_target, None)?.mean,
    });
    for &v in variants {
        let mut cfg = config.clone();
        cfg.disc = v;
        cfg.out_dir = None;
        cfg.resume = None;
        let mut tr = run_training_on(&cfg, data)?;
        let (c, h, w) = REPORT_INPUT;
        let cost = count_flops(&build_discriminator::<f32>(v, c)?, h, w)?;
        rows.push(VariantResult {
            variant: Some(v),
            params: cost.total_params(),
            flops: cost.total_flops(),
            target_miou: tr.evaluate(&data.eval_target, None)?.mean,
        });
    }
    Ok(rows)
}

pub fn format_comparison(rows: &[VariantResult]) -> String {
    let baseline = rows.iter().find(|r| r.variant.is_none()).map(|r| r.target_miou);
    let mut s = String::new();
    let (c, h, w) = REPORT_INPUT;
    writeln!(
        s,
        "{:<16} {:>10} {:>14} {:>12} {:>8}",
        "discriminator",
        "params",
        format!("GFLOPs@{c}x{h}x{w}"),
        "target mIoU",
        "gain"
    )
    .unwrap();
    for r in rows {
        let name = r.variant.map_or("source-only", |v| v.name());
        let (params, flops) = match r.variant {
            Some(_) => (r.params.to_string(), format!("{:.3}", r.flops as f64 / 1e9)),
            None => ("-".into(), "-".into()),
        };
        let gain = match (r.variant, baseline) {
            (Some(_), Some(b)) => format!("{:+.2}", 100.0 * (r.target_miou - b)),
            _ => "-".into(),
        };
        writeln!(s, "{:<16} {:>10} {:>14} {:>12.2} {:>8}", name, params, flops, 100.0 * r.target_miou, gain).unwrap();
    }
    s
}
