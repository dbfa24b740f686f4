//! Training configuration and its `key = value` text form.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::autodiff::Reduction;
use crate::error::{Error, Result};
use crate::models::DiscriminatorVariant;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub num_classes: usize,
    pub width_multiplier: f64,
    pub disc: DiscriminatorVariant,
    pub lambda_adv: f64,
    pub lr_seg: f64,
    pub lr_disc: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub poly_power: f64,
    pub max_iter: u64,
    pub batch: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    /// Seed base of the generated scenes (independent of `seed`).
    pub data_seed: u64,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Read scenes from a `gen-data` directory instead of generating them.
    pub data_root: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    /// Write a checkpoint every this many iterations (0 = final only).
    pub checkpoint_every: u64,
    pub resume: Option<PathBuf>,
    pub loss_reduction: Reduction,
    pub disc_final_zero_init: bool,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: 64×64 scenes, 2000 iterations.
    fn default() -> Self {
        TrainConfig {
            num_classes: 5,
            width_multiplier: 0.5,
            disc: DiscriminatorVariant::FcdLightThin,
            lambda_adv: 0.01,
            lr_seg: 0.05,
            lr_disc: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_eps: 1e-8,
            poly_power: 0.9,
            max_iter: 2000,
            batch: 4,
            seed: 0,
            height: 64,
            width: 64,
            data_seed: 0,
            train_scenes: 200,
            eval_scenes: 50,
            data_root: None,
            out_dir: None,
            checkpoint_every: 0,
            resume: None,
            loss_reduction: Reduction::Mean,
            disc_final_zero_init: true,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean '{value}' for '{key}'"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl TrainConfig {
    /// Full-scale constants: 30k iterations, base rates 2.5e-4 / 1e-5, full
    /// width.
    pub fn full_scale() -> Self {
        TrainConfig {
            num_classes: 19,
            width_multiplier: 1.0,
            lr_seg: 2.5e-4,
            lr_disc: 1e-5,
            max_iter: 30_000,
            height: 512,
            width: 1024,
            ..TrainConfig::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "num_classes" => self.num_classes = parse(key, v)?,
            "width_multiplier" => self.width_multiplier = parse(key, v)?,
            "disc" => self.disc = v.parse().map_err(|e: Error| Error::Config(e.to_string()))?,
            "lambda_adv" => self.lambda_adv = parse(key, v)?,
            "lr_seg" => self.lr_seg = parse(key, v)?,
            "lr_disc" => self.lr_disc = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "adam_beta1" => self.adam_beta1 = parse(key, v)?,
            "adam_beta2" => self.adam_beta2 = parse(key, v)?,
            "adam_eps" => self.adam_eps = parse(key, v)?,
            "poly_power" => self.poly_power = parse(key, v)?,
            "max_iter" => self.max_iter = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "height" => self.height = parse(key, v)?,
            "width" => self.width = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "train_scenes" => self.train_scenes = parse(key, v)?,
            "eval_scenes" => self.eval_scenes = parse(key, v)?,
            "data_root" => self.data_root = optional_path(v),
            "out_dir" => self.out_dir = optional_path(v),
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            "resume" => self.resume = optional_path(v),
            "loss_reduction" => {
                self.loss_reduction = match v {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(Error::Config(format!("loss_reduction must be mean or sum, got '{v}'"))),
                }
            }
            "disc_final_zero_init" => self.disc_final_zero_init = parse_bool(key, v)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the defaults. Blank lines and `#`
    /// comments are skipped; repeated keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key '{key}'", n + 1)));
            }
            let value = value.trim().trim_matches('"');
            cfg.set(key, value)
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, e.to_string().trim_start_matches("config: "))))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(2..=255).contains(&self.num_classes) {
            return fail(format!("num_classes must be in 2..=255, got {}", self.num_classes));
        }
        if !(self.width_multiplier > 0.0) {
            return fail("width_multiplier must be positive".into());
        }
        if !(self.lambda_adv >= 0.0) {
            return fail("lambda_adv must be nonnegative".into());
        }
        if !(self.lr_seg >= 0.0 && self.lr_disc >= 0.0) {
            return fail("learning rates must be nonnegative".into());
        }
        if self.batch == 0 {
            return fail("batch must be at least 1".into());
        }
        if self.height % 32 != 0 || self.width % 32 != 0 || self.height == 0 || self.width == 0 {
            return fail(format!("image size {}x{} must be a positive multiple of 32", self.height, self.width));
        }
        if self.data_root.is_none() && (self.train_scenes == 0 || self.eval_scenes == 0) {
            return fail("train_scenes and eval_scenes must be positive".into());
        }
        Ok(())
    }

    /// Text that [`TrainConfig::parse`] maps back to `self`. Settings that
    /// only steer I/O (`out_dir`, `resume`, `checkpoint_every`) are left
    /// out, so a checkpoint does not depend on how often checkpoints were
    /// written.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let reduction = match self.loss_reduction {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        };
        let pairs: Vec<(&str, String)> = vec![
            ("num_classes", self.num_classes.to_string()),
            ("width_multiplier", self.width_multiplier.to_string()),
            ("disc", self.disc.name().to_string()),
            ("lambda_adv", self.lambda_adv.to_string()),
            ("lr_seg", self.lr_seg.to_string()),
            ("lr_disc", self.lr_disc.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("poly_power", self.poly_power.to_string()),
            ("max_iter", self.max_iter.to_string()),
            ("batch", self.batch.to_string()),
            ("seed", self.seed.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("train_scenes", self.train_scenes.to_string()),
            ("eval_scenes", self.eval_scenes.to_string()),
            ("data_root", path(&self.data_root)),
            ("loss_reduction", reduction.to_string()),
            ("disc_final_zero_init", self.disc_final_zero_init.to_string()),
        ];
        for (k, v) in pairs {
            writeln!(s, "{k} = {v}").unwrap();
        }
        s
    }
}
