//! In-memory domain splits, the on-disk layout
//! `<root>/<split>/<domain>/<seed>.img.sdr|.lbl.sdr`, and paired batches.

use std::fs;
use std::path::{Path, PathBuf};

use super::raster::{Raster, RasterData};
use super::rng::{derive_seed, SeededRng};
use super::scene::{generate_scene, Domain, SceneSample, ShiftConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn sample_to_rasters(s: &SceneSample) -> Result<(Raster, Raster)> {
    let img = Raster::new(3, s.height, s.width, RasterData::F32(s.image.data().to_vec()))?;
    let lbl = Raster::new(1, s.height, s.width, RasterData::U8(s.labels.clone()))?;
    Ok((img, lbl))
}

pub fn sample_from_rasters(img: Raster, lbl: Raster, seed: u64, domain: Domain) -> Result<SceneSample> {
    if img.channels != 3 || lbl.channels != 1 || (img.height, img.width) != (lbl.height, lbl.width) {
        return Err(Error::shape(
            "scene",
            format!(
                "image {}x{}x{} with labels {}x{}x{}",
                img.channels, img.height, img.width, lbl.channels, lbl.height, lbl.width
            ),
        ));
    }
    let (h, w) = (img.height as usize, img.width as usize);
    let (RasterData::F32(pixels), RasterData::U8(labels)) = (img.data, lbl.data) else {
        return Err(Error::Invalid("scene image must be f32 and labels u8".into()));
    };
    Ok(SceneSample {
        image: Tensor::new([3, h, w], pixels)?,
        labels,
        height: h,
        width: w,
        domain,
        seed,
    })
}

pub fn domain_dir(root: &Path, split: &str, domain: Domain) -> PathBuf {
    root.join(split).join(domain.name())
}

/// All scenes of one domain within a split. Labels are reachable only
/// through [`DomainSplit::labeled`]; training batches carry target images
/// alone.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSplit {
    domain: Domain,
    samples: Vec<SceneSample>,
}

impl DomainSplit {
    pub fn from_samples(domain: Domain, samples: Vec<SceneSample>) -> Result<Self> {
        if let Some(first) = samples.first() {
            for s in &samples {
                if (s.height, s.width) != (first.height, first.width) {
                    return Err(Error::shape(
                        "split",
                        format!("mixed scene sizes {}x{} and {}x{}", first.height, first.width, s.height, s.width),
                    ));
                }
                if s.domain != domain {
                    return Err(Error::Invalid(format!("{} scene in a {domain} split", s.domain)));
                }
            }
        }
        Ok(DomainSplit { domain, samples })
    }

    pub fn generate(
        domain: Domain,
        seeds: impl IntoIterator<Item = u64>,
        cfg: &ShiftConfig,
        height: usize,
        width: usize,
        num_classes: usize,
    ) -> Result<Self> {
        let samples = seeds
            .into_iter()
            .map(|seed| generate_scene(seed, domain, cfg, height, width, num_classes))
            .collect::<Result<Vec<_>>>()?;
        DomainSplit::from_samples(domain, samples)
    }

    pub fn save(&self, root: &Path, split: &str) -> Result<()> {
        let dir = domain_dir(root, split, self.domain);
        fs::create_dir_all(&dir)?;
        for s in &self.samples {
            let (img, lbl) = sample_to_rasters(s)?;
            fs::write(dir.join(format!("{}.img.sdr", s.seed)), img.to_bytes())?;
            fs::write(dir.join(format!("{}.lbl.sdr", s.seed)), lbl.to_bytes())?;
        }
        Ok(())
    }

    /// Reads every `<seed>.img.sdr` (with its label file) in ascending seed
    /// order.
    pub fn load(root: &Path, split: &str, domain: Domain) -> Result<Self> {
        let dir = domain_dir(root, split, domain);
        let mut seeds = Vec::new();
        for entry in fs::read_dir(&dir)? {
            let name = entry?.file_name();
            let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".img.sdr")) else {
                continue;
            };
            let seed = stem
                .parse::<u64>()
                .map_err(|_| Error::Invalid(format!("unexpected file name '{stem}.img.sdr' in {}", dir.display())))?;
            seeds.push(seed);
        }
        seeds.sort_unstable();
        let mut samples = Vec::with_capacity(seeds.len());
        for seed in seeds {
            let img = Raster::from_bytes(&fs::read(dir.join(format!("{seed}.img.sdr")))?)?;
            let lbl = Raster::from_bytes(&fs::read(dir.join(format!("{seed}.lbl.sdr")))?)?;
            samples.push(sample_from_rasters(img, lbl, seed, domain)?);
        }
        DomainSplit::from_samples(domain, samples)
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(height, width)` of the scenes, if any.
    pub fn size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.height, s.width))
    }

    pub fn seeds(&self) -> impl Iterator<Item = u64> + '_ {
        self.samples.iter().map(|s| s.seed)
    }

    /// Images with their ground truth, for evaluation.
    pub fn labeled(&self) -> &[SceneSample] {
        &self.samples
    }

    fn stack_images(&self, idx: &[usize]) -> Tensor<f32> {
        let (h, w) = self.size().unwrap_or((0, 0));
        let mut data = Vec::with_capacity(idx.len() * 3 * h * w);
        for &i in idx {
            data.extend_from_slice(self.samples[i].image.data());
        }
        Tensor::new([idx.len(), 3, h, w], data).expect("scene sizes are uniform")
    }

    fn stack_labels(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().flat_map(|&i| self.samples[i].labels.iter().copied()).collect()
    }
}

/// A labelled source batch and an equally sized unlabelled target batch.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainBatch {
    pub source_images: Tensor<f32>,
    pub source_labels: Vec<u8>,
    pub target_images: Tensor<f32>,
}

impl DomainBatch {
    pub fn len(&self) -> usize {
        self.source_images.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Endless stream of paired batches. Each epoch walks the source split in a
/// fresh seeded permutation; target scenes follow their own permutation.
/// The final batch of an epoch may be short.
#[derive(Debug, Clone)]
pub struct BatchIter<'a> {
    source: &'a DomainSplit,
    target: &'a DomainSplit,
    batch: usize,
    seed: u64,
    epoch: u64,
    pos: usize,
    perm_source: Vec<usize>,
    perm_target: Vec<usize>,
}

impl<'a> BatchIter<'a> {
    pub fn new(source: &'a DomainSplit, target: &'a DomainSplit, batch: usize, seed: u64) -> Result<Self> {
        if batch == 0 {
            return Err(Error::Invalid("batch size must be at least 1".into()));
        }
        if source.is_empty() || target.is_empty() {
            return Err(Error::Invalid("empty dataset".into()));
        }
        if source.size() != target.size() {
            return Err(Error::shape("batch_iter", "source and target scene sizes differ"));
        }
        let mut it = BatchIter {
            source,
            target,
            batch,
            seed,
            epoch: 0,
            pos: 0,
            perm_source: Vec::new(),
            perm_target: Vec::new(),
        };
        it.start_epoch(0);
        Ok(it)
    }

    /// Positions the stream so that the next batch is the one a fresh
    /// iterator would yield as its `index`-th.
    pub fn skip_to(&mut self, index: u64) {
        let per = self.batches_per_epoch() as u64;
        self.start_epoch(index / per);
        self.pos = (index % per) as usize * self.batch;
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.source.len().div_ceil(self.batch)
    }

    /// Source order for epoch `epoch`.
    pub fn epoch_order(&self, epoch: u64) -> Vec<usize> {
        SeededRng::new(derive_seed(self.seed, 16 + 2 * epoch)).permutation(self.source.len())
    }

    fn start_epoch(&mut self, epoch: u64) {
        self.epoch = epoch;
        self.pos = 0;
        self.perm_source = self.epoch_order(epoch);
        self.perm_target = SeededRng::new(derive_seed(self.seed, 17 + 2 * epoch)).permutation(self.target.len());
    }
}

impl Iterator for BatchIter<'_> {
    type Item = DomainBatch;

    fn next(&mut self) -> Option<DomainBatch> {
        if self.pos >= self.perm_source.len() {
            self.start_epoch(self.epoch + 1);
        }
        let end = (self.pos + self.batch).min(self.perm_source.len());
        let src: Vec<usize> = self.perm_source[self.pos..end].to_vec();
        let nt = self.perm_target.len();
        let tgt: Vec<usize> = (self.pos..end).map(|j| self.perm_target[j % nt]).collect();
        self.pos = end;
        Some(DomainBatch {
            source_images: self.source.stack_images(&src),
            source_labels: self.source.stack_labels(&src),
            target_images: self.target.stack_images(&tgt),
        })
    }
}
