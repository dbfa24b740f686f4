//! Concrete architectures and the analytical cost model.

mod bisenet;
mod cost;
mod discriminator;

pub use bisenet::{build_mini_bisenet, scaled, TOTAL_STRIDE as SEGMENTER_STRIDE};
pub use cost::{count_flops, human_count, CostReport, CostRow};
pub use discriminator::{build_discriminator, DiscriminatorVariant, LEAKY_SLOPE};
