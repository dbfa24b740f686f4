//! Procedural scenes: a background plus a handful of class-coloured shapes,
//! rendered in either the source or the shifted target appearance.

use std::fmt;
use std::str::FromStr;

use super::rng::{derive_seed, SeededRng};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }

    fn stream(self) -> u64 {
        match self {
            Domain::Source => 1,
            Domain::Target => 2,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "source" | "src" => Ok(Domain::Source),
            "target" | "tgt" => Ok(Domain::Target),
            other => Err(Error::Invalid(format!("unknown domain '{other}'"))),
        }
    }
}

/// Appearance model of the two domains.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftConfig {
    /// Row-stochastic colour mixing applied to target pixels.
    pub mixing: [[f64; 3]; 3],
    /// Per-channel exponent applied to target pixels after mixing.
    pub gamma: [f64; 3],
    pub sigma_source: f64,
    pub sigma_target: f64,
    /// Base colour per class; entry 0 is the background.
    pub palette: Vec<[f64; 3]>,
}

const BASE_PALETTE: [[f64; 3]; 5] = [
    [0.45, 0.45, 0.45],
    [0.85, 0.20, 0.20],
    [0.20, 0.75, 0.25],
    [0.20, 0.30, 0.85],
    [0.85, 0.80, 0.20],
];

fn palette(num_classes: usize) -> Vec<[f64; 3]> {
    (0..num_classes)
        .map(|c| {
            if c < BASE_PALETTE.len() {
                return BASE_PALETTE[c];
            }
            // Further classes walk around the hue circle.
            let h = (c as f64 * 0.618_033_988_75).fract() * 6.0;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [0.15 + 0.7 * r, 0.15 + 0.7 * g, 0.15 + 0.7 * b]
        })
        .collect()
}

impl ShiftConfig {
    /// Default target shift: a partial hue rotation (each channel keeps 60%
    /// and takes 40% from a neighbour) followed by per-channel gamma.
    pub fn new(num_classes: usize) -> Self {
        ShiftConfig {
            mixing: [[0.6, 0.0, 0.4], [0.4, 0.6, 0.0], [0.0, 0.4, 0.6]],
            gamma: [1.2, 0.9, 1.0],
            sigma_source: 0.05,
            sigma_target: 0.10,
            palette: palette(num_classes),
        }
    }

    /// No appearance shift; both domains use `sigma`.
    pub fn identity(num_classes: usize, sigma: f64) -> Self {
        ShiftConfig {
            mixing: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            gamma: [1.0; 3],
            sigma_source: sigma,
            sigma_target: sigma,
            palette: palette(num_classes),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        for (i, row) in self.mixing.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("mixing row {i} sums to {s}, expected 1")));
            }
        }
        if self.gamma.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::Invalid(format!("gammas must be positive, got {:?}", self.gamma)));
        }
        if !(self.sigma_source >= 0.0 && self.sigma_target >= 0.0) {
            return Err(Error::Invalid("noise levels must be nonnegative".into()));
        }
        if self.palette.len() < num_classes {
            return Err(Error::Invalid(format!(
                "palette has {} colours for {num_classes} classes",
                self.palette.len()
            )));
        }
        Ok(())
    }

    fn sigma(&self, domain: Domain) -> f64 {
        match domain {
            Domain::Source => self.sigma_source,
            Domain::Target => self.sigma_target,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    /// `[3, H, W]`, values in [0, 1].
    pub image: Tensor<f32>,
    /// Row-major `H × W` class indices.
    pub labels: Vec<u8>,
    pub height: usize,
    pub width: usize,
    pub domain: Domain,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Disk,
    Stripes,
    Triangle,
}

/// Every foreground class is drawn with one fixed shape kind.
pub fn shape_for_class(class: usize) -> ShapeKind {
    match (class.max(1) - 1) % 4 {
        0 => ShapeKind::Rect,
        1 => ShapeKind::Disk,
        2 => ShapeKind::Stripes,
        _ => ShapeKind::Triangle,
    }
}

#[derive(Debug, Clone)]
enum Geometry {
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
    Stripes { x0: f64, y0: f64, x1: f64, y1: f64, period: f64, phase: f64 },
    Triangle { p: [(f64, f64); 3] },
}

impl Geometry {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Geometry::Rect { x0, y0, x1, y1 } => x >= x0 && x < x1 && y >= y0 && y < y1,
            Geometry::Disk { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Geometry::Stripes { x0, y0, x1, y1, period, phase } => {
                x >= x0 && x < x1 && y >= y0 && y < y1 && (x + y + phase).rem_euclid(period) < 0.5 * period
            }
            Geometry::Triangle { p } => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.0 - a.0) * (y - a.1) - (b.1 - a.1) * (x - a.0);
                let d = [edge(p[0], p[1]), edge(p[1], p[2]), edge(p[2], p[0])];
                d.iter().all(|&v| v >= 0.0) || d.iter().all(|&v| v <= 0.0)
            }
        }
    }
}

struct Shape {
    class: usize,
    geometry: Geometry,
    color: [f64; 3],
}

fn draw_geometry(rng: &mut SeededRng, kind: ShapeKind, h: f64, w: f64) -> Geometry {
    let s = h.min(w);
    match kind {
        ShapeKind::Rect => {
            let rw = rng.uniform_in(0.15, 0.4) * s;
            let rh = rng.uniform_in(0.15, 0.4) * s;
            let x0 = rng.uniform_in(0.0, w - rw);
            let y0 = rng.uniform_in(0.0, h - rh);
            Geometry::Rect { x0, y0, x1: x0 + rw, y1: y0 + rh }
        }
        ShapeKind::Disk => {
            let r = rng.uniform_in(0.08, 0.2) * s;
            let cx = rng.uniform_in(r, w - r);
            let cy = rng.uniform_in(r, h - r);
            Geometry::Disk { cx, cy, r }
        }
        ShapeKind::Stripes => {
            let b = rng.uniform_in(0.35, 0.55) * s;
            let x0 = rng.uniform_in(0.0, w - b);
            let y0 = rng.uniform_in(0.0, h - b);
            let period = rng.uniform_in(0.25, 0.35) * s;
            let phase = rng.uniform_in(0.0, period);
            Geometry::Stripes { x0, y0, x1: x0 + b, y1: y0 + b, period, phase }
        }
        ShapeKind::Triangle => loop {
            let b = rng.uniform_in(0.25, 0.45) * s;
            let ox = rng.uniform_in(0.0, w - b);
            let oy = rng.uniform_in(0.0, h - b);
            let mut p = [(0.0, 0.0); 3];
            for v in &mut p {
                *v = (ox + rng.uniform() * b, oy + rng.uniform() * b);
            }
            let area = 0.5 * ((p[1].0 - p[0].0) * (p[2].1 - p[0].1) - (p[2].0 - p[0].0) * (p[1].1 - p[0].1)).abs();
            if area >= 0.1 * b * b {
                break Geometry::Triangle { p };
            }
        },
    }
}

fn draw_layout(rng: &mut SeededRng, cfg: &ShiftConfig, k: usize, h: usize, w: usize) -> Vec<Shape> {
    let fg = k - 1;
    let n = rng.below(3, 9).max(fg.min(8));
    let mut classes: Vec<usize> = rng.permutation(fg).into_iter().map(|c| c + 1).take(n).collect();
    while classes.len() < n {
        classes.push(rng.below(1, k));
    }
    classes
        .into_iter()
        .map(|class| {
            let geometry = draw_geometry(rng, shape_for_class(class), h as f64, w as f64);
            let base = cfg.palette[class];
            let mut color = [0.0; 3];
            for (c, b) in color.iter_mut().zip(base) {
                *c = (b + rng.uniform_in(-0.08, 0.08)).clamp(0.0, 1.0);
            }
            Shape { class, geometry, color }
        })
        .collect()
}

fn rasterize(shapes: &[Shape], h: usize, w: usize) -> Vec<u8> {
    let mut labels = vec![0u8; h * w];
    for (idx, shape) in shapes.iter().enumerate() {
        for y in 0..h {
            for x in 0..w {
                if shape.geometry.contains(x as f64 + 0.5, y as f64 + 0.5) {
                    labels[y * w + x] = (idx + 1) as u8;
                }
            }
        }
    }
    labels
}

const MAX_LAYOUT_ATTEMPTS: usize = 100;

/// Renders scene `seed` in `domain`. Geometry and labels depend only on the
/// seed; the domain changes colour mixing, gamma and noise.
pub fn generate_scene(
    seed: u64,
    domain: Domain,
    cfg: &ShiftConfig,
    height: usize,
    width: usize,
    num_classes: usize,
) -> Result<SceneSample> {
    if height < 16 || width < 16 {
        return Err(Error::Invalid(format!("scene size {height}x{width} is below 16x16")));
    }
    if !(2..=255).contains(&num_classes) {
        return Err(Error::Invalid(format!("num_classes must be in 2..=255, got {num_classes}")));
    }
    cfg.validate(num_classes)?;

    let (h, w) = (height, width);
    let min_pixels = (h * w / 256).max(4);
    let mut geo = SeededRng::new(derive_seed(seed, 0));
    let mut shapes = Vec::new();
    // Shape indices per pixel (0 = background); later shapes occlude.
    let mut owner = Vec::new();
    for _ in 0..MAX_LAYOUT_ATTEMPTS {
        shapes = draw_layout(&mut geo, cfg, num_classes, h, w);
        owner = rasterize(&shapes, h, w);
        let mut counts = vec![0usize; num_classes];
        for &o in &owner {
            let class = if o == 0 { 0 } else { shapes[o as usize - 1].class };
            counts[class] += 1;
        }
        let wanted = shapes.iter().map(|s| s.class).chain([0]);
        if wanted.into_iter().all(|c| counts[c] >= min_pixels) {
            break;
        }
    }

    let bg = cfg.palette[0];
    let tilt = geo.uniform_in(0.0, std::f64::consts::TAU);
    let (gx, gy) = (0.1 * tilt.cos(), 0.1 * tilt.sin());

    let sigma = cfg.sigma(domain);
    let mut noise = SeededRng::new(derive_seed(seed, domain.stream()));
    let mut image = vec![0f32; 3 * h * w];
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let o = owner[i] as usize;
            let rgb = if o == 0 {
                let ramp = gx * (x as f64 / w as f64 - 0.5) + gy * (y as f64 / h as f64 - 0.5);
                [bg[0] + ramp, bg[1] + ramp, bg[2] + ramp]
            } else {
                labels[i] = shapes[o - 1].class as u8;
                shapes[o - 1].color
            };
            let shifted = match domain {
                Domain::Source => rgb,
                Domain::Target => {
                    let mut out = [0.0; 3];
                    for (c, v) in out.iter_mut().enumerate() {
                        let row = cfg.mixing[c];
                        let mixed = row[0] * rgb[0] + row[1] * rgb[1] + row[2] * rgb[2];
                        *v = mixed.clamp(0.0, 1.0).powf(cfg.gamma[c]);
                    }
                    out
                }
            };
            for c in 0..3 {
                let v = shifted[c] + sigma * noise.normal();
                image[c * h * w + i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }

    Ok(SceneSample {
        image: Tensor::new([3, h, w], image)?,
        labels,
        height: h,
        width: w,
        domain,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_kinds_cycle_through_foreground_classes() {
        assert_eq!(shape_for_class(1), ShapeKind::Rect);
        assert_eq!(shape_for_class(2), ShapeKind::Disk);
        assert_eq!(shape_for_class(3), ShapeKind::Stripes);
        assert_eq!(shape_for_class(4), ShapeKind::Triangle);
        assert_eq!(shape_for_class(5), ShapeKind::Rect);
    }

    #[test]
    fn default_shift_is_valid() {
        ShiftConfig::new(5).validate(5).unwrap();
        let mut bad = ShiftConfig::new(5);
        bad.mixing[1][1] += 0.01;
        assert!(bad.validate(5).is_err());
        let mut bad = ShiftConfig::new(5);
        bad.gamma[2] = 0.0;
        assert!(bad.validate(5).is_err());
        assert!(ShiftConfig::new(5).validate(6).is_err());
    }

    #[test]
    fn palette_extends_past_five_classes() {
        let p = palette(12);
        assert_eq!(p.len(), 12);
        assert!(p.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn preconditions() {
        let cfg = ShiftConfig::new(5);
        assert!(generate_scene(0, Domain::Source, &cfg, 8, 64, 5).is_err());
        assert!(generate_scene(0, Domain::Source, &cfg, 64, 64, 1).is_err());
    }
}
