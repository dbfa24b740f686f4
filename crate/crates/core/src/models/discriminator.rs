use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::nn::{Layer, ModelGraph};
use crate::real::Real;

pub const KERNEL: usize = 4;
pub const STRIDE: usize = 2;
pub const PAD: usize = 1;
pub const LEAKY_SLOPE: f64 = 0.2;

/// The three fully convolutional domain discriminators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DiscriminatorVariant {
    /// Five standard 4×4 convolutions.
    Fcd,
    /// Five depthwise-separable convolutions.
    FcdLight,
    /// Three depthwise-separable convolutions.
    FcdLightThin,
}

impl DiscriminatorVariant {
    pub const ALL: [DiscriminatorVariant; 3] = [Self::Fcd, Self::FcdLight, Self::FcdLightThin];

    pub fn channels(self) -> &'static [usize] {
        match self {
            Self::Fcd | Self::FcdLight => &[64, 128, 256, 512, 1],
            Self::FcdLightThin => &[64, 128, 1],
        }
    }

    pub fn separable(self) -> bool {
        !matches!(self, Self::Fcd)
    }

    /// Total downsampling factor of the output grid.
    pub fn total_stride(self) -> usize {
        STRIDE.pow(self.channels().len() as u32)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Fcd => "FCD",
            Self::FcdLight => "FCD-Light",
            Self::FcdLightThin => "FCD-Light&Thin",
        }
    }

    /// Stable small integer used in checkpoints.
    pub fn code(self) -> u32 {
        match self {
            Self::Fcd => 0,
            Self::FcdLight => 1,
            Self::FcdLightThin => 2,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.code() == code)
            .ok_or_else(|| Error::Invalid(format!("unknown discriminator code {code}")))
    }
}

impl fmt::Display for DiscriminatorVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DiscriminatorVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '-' | '_' | '&' | ' '))
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "fcd" => Ok(Self::Fcd),
            "fcdlight" => Ok(Self::FcdLight),
            "fcdlightthin" | "lightthin" => Ok(Self::FcdLightThin),
            _ => Err(Error::Invalid(format!(
                "unknown discriminator variant '{s}' (expected FCD, FCD-Light or FCD-Light&Thin)"
            ))),
        }
    }
}

/// Build a discriminator over `num_classes`-channel probability maps. The
/// last layer emits raw single-channel logits.
pub fn build_discriminator<T: Real>(variant: DiscriminatorVariant, num_classes: usize) -> Result<ModelGraph<T>> {
    if num_classes < 2 {
        return Err(Error::Invalid(format!("discriminator needs at least 2 classes, got {num_classes}")));
    }
    let mut g = ModelGraph::new(num_classes);
    let widths = variant.channels();
    let mut cin = num_classes;
    for (i, &cout) in widths.iter().enumerate() {
        let name = format!("conv{}", i + 1);
        let from = g.output();
        if variant.separable() {
            g.add_dsconv(&name, cin, cout, KERNEL, STRIDE, PAD, from)?;
        } else {
            g.add_conv(&name, cin, cout, KERNEL, STRIDE, PAD, from)?;
        }
        if i + 1 < widths.len() {
            g.then(format!("lrelu{}", i + 1), Layer::LeakyRelu(LEAKY_SLOPE))?;
        }
        cin = cout;
    }
    Ok(g)
}
