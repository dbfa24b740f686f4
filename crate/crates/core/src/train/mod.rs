//! The alternating adversarial loop: a segmentation step on
//! `L_seg + λ·L_adv` with the discriminator frozen, then a discriminator
//! step on detached softmax maps of both domains.

mod checkpoint;
mod compare;
mod config;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256StarStar;

use crate::autodiff::Tape;
use crate::data::{derive_seed, BatchIter, DomainBatch, DomainSplit, Domain, ShiftConfig};
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, IouReport};
use crate::models::{build_discriminator, build_mini_bisenet};
use crate::nn::{init_kaiming, zero_final_layer, Mode, ModelGraph, ParamKind};
use crate::objectives::{adv_loss, disc_loss, poly_lr, seg_cross_entropy_logits, total_seg_objective, IGNORE_INDEX};
use crate::optim::{Adam, Sgd};
use crate::tensor::Tensor;

pub use checkpoint::{decode_text, decode_u64, encode_text, encode_u64, Checkpoint};
pub use compare::{compare_variants, format_comparison, VariantResult};
pub use config::TrainConfig;

/// Seed offsets of the generated splits relative to `data_seed · 10⁶`.
const SOURCE_TRAIN_OFFSET: u64 = 0;
const TARGET_TRAIN_OFFSET: u64 = 100_000;
const TARGET_EVAL_OFFSET: u64 = 200_000;
const SOURCE_EVAL_OFFSET: u64 = 300_000;

/// Training and evaluation scenes of both domains.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub source: DomainSplit,
    pub target: DomainSplit,
    pub eval_source: DomainSplit,
    pub eval_target: DomainSplit,
}

impl TrainData {
    pub fn generate(cfg: &TrainConfig) -> Result<Self> {
        TrainData::generate_with(cfg, &ShiftConfig::new(cfg.num_classes))
    }

    pub fn generate_with(cfg: &TrainConfig, shift: &ShiftConfig) -> Result<Self> {
        let base = cfg.data_seed.wrapping_mul(1_000_000);
        let split = |domain, offset: u64, n: usize| {
            let seeds = (0..n as u64).map(|i| base.wrapping_add(offset + i));
            DomainSplit::generate(domain, seeds, shift, cfg.height, cfg.width, cfg.num_classes)
        };
        Ok(TrainData {
            source: split(Domain::Source, SOURCE_TRAIN_OFFSET, cfg.train_scenes)?,
            target: split(Domain::Target, TARGET_TRAIN_OFFSET, cfg.train_scenes)?,
            eval_source: split(Domain::Source, SOURCE_EVAL_OFFSET, cfg.eval_scenes)?,
            eval_target: split(Domain::Target, TARGET_EVAL_OFFSET, cfg.eval_scenes)?,
        })
    }

    /// Reads `train/{source,target}` and `val/{source,target}` under `root`.
    pub fn load(root: &Path) -> Result<Self> {
        Ok(TrainData {
            source: DomainSplit::load(root, "train", Domain::Source)?,
            target: DomainSplit::load(root, "train", Domain::Target)?,
            eval_source: DomainSplit::load(root, "val", Domain::Source)?,
            eval_target: DomainSplit::load(root, "val", Domain::Target)?,
        })
    }

    pub fn for_config(cfg: &TrainConfig) -> Result<Self> {
        match &cfg.data_root {
            Some(root) => TrainData::load(root),
            None => TrainData::generate(cfg),
        }
    }
}

/// Losses and learning rates of one iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub iteration: u64,
    pub l_seg: f32,
    pub l_adv: f32,
    pub l_d: f32,
    pub lr_seg: f64,
    pub lr_disc: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub seg: ModelGraph<f32>,
    pub disc: ModelGraph<f32>,
    pub sgd: Sgd<f32>,
    pub adam: Adam<f32>,
    pub iteration: u64,
    pub history: Vec<LossRecord>,
}

fn diverged(iteration: u64, loss: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| {
        if e.is_numerical() {
            Error::Diverged { iteration, loss }
        } else {
            e
        }
    }
}

fn finite(value: f32, iteration: u64, loss: &'static str) -> Result<f32> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Diverged { iteration, loss })
    }
}

/// Per-pixel argmax over channels of `[N,C,H,W]` scores; ties go to the
/// lower class index.
pub fn argmax_channels(scores: &Tensor<f32>) -> Result<Vec<u8>> {
    let (n, c, h, w) = scores.dims4()?;
    if c > 256 {
        return Err(Error::Invalid(format!("{c} classes do not fit in a label byte")));
    }
    let plane = h * w;
    let d = scores.data();
    let mut out = Vec::with_capacity(n * plane);
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut best = 0;
            let mut best_v = d[base + p];
            for k in 1..c {
                let v = d[base + k * plane + p];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let mut seg = build_mini_bisenet::<f32>(config.num_classes, config.width_multiplier)?;
        let mut disc = build_discriminator::<f32>(config.disc, config.num_classes)?;
        init_kaiming(&mut seg, &mut Xoshiro256StarStar::seed_from_u64(derive_seed(config.seed, 1000)));
        init_kaiming(&mut disc, &mut Xoshiro256StarStar::seed_from_u64(derive_seed(config.seed, 1001)));
        if config.disc_final_zero_init {
            zero_final_layer(&mut disc);
        }
        let sgd = Sgd::new(seg.store(), config.momentum, config.weight_decay);
        let adam = Adam::new(disc.store(), config.adam_beta1, config.adam_beta2, config.adam_eps);
        Ok(Trainer {
            config,
            seg,
            disc,
            sgd,
            adam,
            iteration: 0,
            history: Vec::new(),
        })
    }

    /// `(lr_seg, lr_disc)` used at iteration `iter`.
    pub fn learning_rates(&self, iter: u64) -> (f64, f64) {
        let c = &self.config;
        (
            poly_lr(c.lr_seg, iter, c.max_iter, c.poly_power),
            poly_lr(c.lr_disc, iter, c.max_iter, c.poly_power),
        )
    }

    fn running_stats(&self) -> Vec<(usize, Tensor<f32>)> {
        let store = self.seg.store();
        (0..store.len())
            .filter(|&i| store.entry(i).kind == ParamKind::Buffer)
            .map(|i| (i, store.value(i).clone()))
            .collect()
    }

    fn restore_running_stats(&mut self, saved: Vec<(usize, Tensor<f32>)>) -> Result<()> {
        for (i, t) in saved {
            self.seg.store_mut().set_value(i, t)?;
        }
        Ok(())
    }

    /// One adversarial iteration on a paired batch.
    pub fn train_iteration(&mut self, batch: &DomainBatch) -> Result<LossRecord> {
        let it = self.iteration;
        let (lr_seg, lr_disc) = self.learning_rates(it);
        let red = self.config.loss_reduction;

        // Segmentation step with the discriminator frozen.
        self.seg.store_mut().zero_grad();
        self.disc.store_mut().set_frozen(true);
        let mut tape = Tape::<f32>::new();
        let xs = tape.constant(batch.source_images.clone());
        let logits_s = self.seg.forward(&mut tape, xs, Mode::Train).map_err(diverged(it, "l_seg"))?;
        let l_seg = seg_cross_entropy_logits(&mut tape, logits_s, &batch.source_labels, red).map_err(diverged(it, "l_seg"))?;

        // Target batches normalize with their own statistics but never feed
        // the running estimates used at evaluation.
        let saved = self.running_stats();
        let xt = tape.constant(batch.target_images.clone());
        let logits_t = self.seg.forward(&mut tape, xt, Mode::Train).map_err(diverged(it, "l_adv"));
        self.restore_running_stats(saved)?;
        let logits_t = logits_t?;
        let p_t = tape.softmax_channels(logits_t).map_err(diverged(it, "l_adv"))?;
        let d_t = self.disc.forward(&mut tape, p_t, Mode::Train).map_err(diverged(it, "l_adv"))?;
        let l_adv = adv_loss(&mut tape, d_t, red).map_err(diverged(it, "l_adv"))?;
        let total = total_seg_objective(&mut tape, l_seg, l_adv, self.config.lambda_adv).map_err(diverged(it, "l_seg"))?;

        let l_seg_v = finite(tape.value(l_seg).data()[0], it, "l_seg")?;
        let l_adv_v = finite(tape.value(l_adv).data()[0], it, "l_adv")?;
        let grads = tape.backward(total).map_err(diverged(it, "l_seg"))?;
        self.seg.store_mut().accumulate(&grads)?;
        self.sgd.step(self.seg.store_mut(), lr_seg)?;
        self.disc.store_mut().set_frozen(false);

        // Discriminator step on detached maps.
        let ps_value = tape.value(logits_s).clone();
        let pt_value = tape.value(p_t).clone();
        drop(tape);
        self.disc.store_mut().zero_grad();
        let mut tape = Tape::<f32>::new();
        let zs = tape.constant(ps_value);
        let p_s = tape.softmax_channels(zs).map_err(diverged(it, "l_d"))?;
        let p_t = tape.constant(pt_value);
        let d_s = self.disc.forward(&mut tape, p_s, Mode::Train).map_err(diverged(it, "l_d"))?;
        let d_t = self.disc.forward(&mut tape, p_t, Mode::Train).map_err(diverged(it, "l_d"))?;
        let l_d = disc_loss(&mut tape, d_s, d_t, red).map_err(diverged(it, "l_d"))?;
        let l_d_v = finite(tape.value(l_d).data()[0], it, "l_d")?;
        let grads = tape.backward(l_d).map_err(diverged(it, "l_d"))?;
        self.disc.store_mut().accumulate(&grads)?;
        self.adam.step(self.disc.store_mut(), lr_disc)?;

        self.iteration += 1;
        let rec = LossRecord {
            iteration: it,
            l_seg: l_seg_v,
            l_adv: l_adv_v,
            l_d: l_d_v,
            lr_seg,
            lr_disc,
        };
        self.history.push(rec);
        Ok(rec)
    }

    /// Plain supervised step on the source half of `batch`; the reference
    /// for what an adversarial step with λ = 0 must reproduce.
    pub fn supervised_step(&mut self, batch: &DomainBatch) -> Result<f32> {
        let it = self.iteration;
        let (lr_seg, _) = self.learning_rates(it);
        self.seg.store_mut().zero_grad();
        let mut tape = Tape::<f32>::new();
        let xs = tape.constant(batch.source_images.clone());
        let logits = self.seg.forward(&mut tape, xs, Mode::Train).map_err(diverged(it, "l_seg"))?;
        let l = seg_cross_entropy_logits(&mut tape, logits, &batch.source_labels, self.config.loss_reduction)
            .map_err(diverged(it, "l_seg"))?;
        let v = finite(tape.value(l).data()[0], it, "l_seg")?;
        let grads = tape.backward(l)?;
        self.seg.store_mut().accumulate(&grads)?;
        self.sgd.step(self.seg.store_mut(), lr_seg)?;
        self.iteration += 1;
        Ok(v)
    }

    /// Batches in the order the trainer consumes them, starting at the
    /// current iteration.
    pub fn batches<'a>(&self, data: &'a TrainData) -> Result<BatchIter<'a>> {
        let mut it = BatchIter::new(
            &data.source,
            &data.target,
            self.config.batch,
            derive_seed(self.config.seed, 1002),
        )?;
        it.skip_to(self.iteration);
        Ok(it)
    }

    /// Trains until `max_iter`, calling `on_checkpoint` every
    /// `checkpoint_every` iterations.
    pub fn run(&mut self, data: &TrainData, mut on_checkpoint: impl FnMut(&Trainer) -> Result<()>) -> Result<()> {
        let mut batches = self.batches(data)?;
        while self.iteration < self.config.max_iter {
            let batch = batches.next().expect("endless stream");
            self.train_iteration(&batch)?;
            let every = self.config.checkpoint_every;
            if every > 0 && self.iteration % every == 0 && self.iteration < self.config.max_iter {
                on_checkpoint(self)?;
            }
        }
        Ok(())
    }

    /// Eval-mode class predictions for `[N,3,H,W]` images.
    pub fn predict(&mut self, images: Tensor<f32>) -> Result<Vec<u8>> {
        let logits = self.seg.infer(images)?;
        argmax_channels(&logits)
    }

    pub fn confusion(&mut self, split: &DomainSplit) -> Result<ConfusionMatrix> {
        if split.is_empty() {
            return Err(Error::Invalid("evaluation split is empty".into()));
        }
        let k = self.config.num_classes;
        let mut cm = ConfusionMatrix::new(k);
        for chunk in split.labeled().chunks(8) {
            if let Some(&bad) = chunk
                .iter()
                .flat_map(|s| s.labels.iter())
                .find(|&&l| l != IGNORE_INDEX && l as usize >= k)
            {
                return Err(Error::Invalid(format!(
                    "class-count mismatch: dataset label {bad} but the model has {k} classes"
                )));
            }
            let (h, w) = (chunk[0].height, chunk[0].width);
            let mut data = Vec::with_capacity(chunk.len() * 3 * h * w);
            let mut labels = Vec::with_capacity(chunk.len() * h * w);
            for s in chunk {
                data.extend_from_slice(s.image.data());
                labels.extend_from_slice(&s.labels);
            }
            let pred = self.predict(Tensor::new([chunk.len(), 3, h, w], data)?)?;
            cm.accumulate(&pred, &labels)?;
        }
        Ok(cm)
    }

    pub fn evaluate(&mut self, split: &DomainSplit, subset: Option<&[usize]>) -> Result<IouReport> {
        self.confusion(split)?.report(subset)
    }

    /// `iter,l_seg,l_adv,l_d,lr_seg,lr_disc` rows for every recorded
    /// iteration.
    pub fn loss_csv(&self) -> String {
        let mut s = String::from("iter,l_seg,l_adv,l_d,lr_seg,lr_disc\n");
        for r in &self.history {
            writeln!(s, "{},{},{},{},{},{}", r.iteration, r.l_seg, r.l_adv, r.l_d, r.lr_seg, r.lr_disc).unwrap();
        }
        s
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut t: Vec<(String, Tensor<f32>)> = vec![
            ("meta/config".into(), encode_text(&self.config.to_text())),
            ("meta/adam_step".into(), encode_u64(self.adam.step)),
        ];
        let hist: Vec<f32> = self.history.iter().flat_map(|r| [r.l_seg, r.l_adv, r.l_d]).collect();
        t.push(("meta/history".into(), Tensor::new([self.history.len(), 3], hist)?));
        for (prefix, graph) in [("seg", &self.seg), ("disc", &self.disc)] {
            for e in graph.store().entries() {
                t.push((format!("{prefix}/{}", e.name), (*e.value).clone()));
            }
        }
        let trainable = |g: &ModelGraph<f32>| -> Vec<String> {
            g.store()
                .entries()
                .iter()
                .filter(|e| e.kind == ParamKind::Trainable)
                .map(|e| e.name.clone())
                .collect()
        };
        for (name, v) in trainable(&self.seg).into_iter().zip(&self.sgd.velocity) {
            t.push((format!("sgd/{name}"), v.clone()));
        }
        let disc_names = trainable(&self.disc);
        for (name, m) in disc_names.iter().zip(&self.adam.m) {
            t.push((format!("adam.m/{name}"), m.clone()));
        }
        for (name, v) in disc_names.iter().zip(&self.adam.v) {
            t.push((format!("adam.v/{name}"), v.clone()));
        }
        Ok(Checkpoint {
            iteration: self.iteration,
            tensors: t,
        })
    }

    /// Rebuilds the trainer stored in `ckpt`. Every tensor must be present
    /// with its original shape.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let get = |name: &str| {
            ckpt.get(name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks tensor '{name}'")))
        };
        let config = TrainConfig::parse(&decode_text(get("meta/config")?)?)?;
        let mut tr = Trainer::new(config)?;
        tr.iteration = ckpt.iteration;
        tr.adam.step = decode_u64(get("meta/adam_step")?)?;
        let hist = get("meta/history")?;
        if hist.shape() != [ckpt.iteration as usize, 3] {
            return Err(Error::Invalid(format!(
                "history of shape {:?} for iteration {}",
                hist.shape(),
                ckpt.iteration
            )));
        }
        tr.history = hist
            .data()
            .chunks(3)
            .enumerate()
            .map(|(i, c)| {
                let (lr_seg, lr_disc) = tr.learning_rates(i as u64);
                LossRecord {
                    iteration: i as u64,
                    l_seg: c[0],
                    l_adv: c[1],
                    l_d: c[2],
                    lr_seg,
                    lr_disc,
                }
            })
            .collect();

        let fetch = |name: String, like: &Tensor<f32>| -> Result<Tensor<f32>> {
            let t = get(&name)?;
            if t.shape() != like.shape() {
                return Err(Error::shape(
                    "checkpoint",
                    format!("'{name}' stored as {:?}, model expects {:?}", t.shape(), like.shape()),
                ));
            }
            Ok(t.clone())
        };
        let mut expected = 3;
        for prefix in ["seg", "disc"] {
            let graph = if prefix == "seg" { &mut tr.seg } else { &mut tr.disc };
            let store = graph.store_mut();
            for i in 0..store.len() {
                let name = format!("{prefix}/{}", store.entry(i).name);
                let t = fetch(name, store.value(i))?;
                store.set_value(i, t)?;
                expected += 1;
            }
        }
        let names = |g: &ModelGraph<f32>| -> Vec<String> {
            g.store()
                .entries()
                .iter()
                .filter(|e| e.kind == ParamKind::Trainable)
                .map(|e| e.name.clone())
                .collect()
        };
        let seg_names = names(&tr.seg);
        for (name, v) in seg_names.iter().zip(tr.sgd.velocity.iter_mut()) {
            *v = fetch(format!("sgd/{name}"), v)?;
            expected += 1;
        }
        let disc_names = names(&tr.disc);
        for (name, m) in disc_names.iter().zip(tr.adam.m.iter_mut()) {
            *m = fetch(format!("adam.m/{name}"), m)?;
            expected += 1;
        }
        for (name, v) in disc_names.iter().zip(tr.adam.v.iter_mut()) {
            *v = fetch(format!("adam.v/{name}"), v)?;
            expected += 1;
        }
        if ckpt.tensors.len() != expected {
            return Err(Error::Invalid(format!(
                "checkpoint holds {} tensors, expected {expected}",
                ckpt.tensors.len()
            )));
        }
        Ok(tr)
    }
}

/// Writes `<out>/ckpt_<iter>.rtda`, `<out>/final.rtda` and `<out>/loss.csv`.
fn save_outputs(tr: &Trainer, out: &Path, name: &str) -> Result<()> {
    fs::create_dir_all(out)?;
    tr.checkpoint()?.save(&out.join(name))?;
    fs::write(out.join("loss.csv"), tr.loss_csv())?;
    Ok(())
}

/// Full training run described by `config`: builds or resumes the trainer,
/// loops to `max_iter`, and writes checkpoints and the loss log to
/// `out_dir` when one is set.
pub fn run_training(config: &TrainConfig) -> Result<Trainer> {
    let data = TrainData::for_config(config)?;
    run_training_on(config, &data)
}

pub fn run_training_on(config: &TrainConfig, data: &TrainData) -> Result<Trainer> {
    let mut tr = match &config.resume {
        Some(path) => {
            let mut tr = Trainer::from_checkpoint(&Checkpoint::load(path)?)?;
            let (mut a, mut b) = (tr.config.clone(), config.clone());
            for c in [&mut a, &mut b] {
                c.out_dir = None;
                c.resume = None;
                c.checkpoint_every = 0;
            }
            if a != b {
                return Err(Error::Config(format!(
                    "resume checkpoint {} was written with a different configuration",
                    path.display()
                )));
            }
            tr.config.out_dir = config.out_dir.clone();
            tr.config.checkpoint_every = config.checkpoint_every;
            tr
        }
        None => Trainer::new(config.clone())?,
    };
    let out: Option<PathBuf> = config.out_dir.clone();
    tr.run(data, |t| match &out {
        Some(dir) => save_outputs(t, dir, &format!("ckpt_{}.rtda", t.iteration)),
        None => Ok(()),
    })?;
    if let Some(dir) = &out {
        save_outputs(&tr, dir, "final.rtda")?;
    }
    Ok(tr)
}
