//! Confusion matrices and intersection-over-union.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::objectives::IGNORE_INDEX;

/// `K × K` pixel counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        ConfusionMatrix {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix", "rows must form a square matrix"));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn diagonal_sum(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    pub fn accumulate(&mut self, pred: &[u8], truth: &[u8]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape(
                "accumulate",
                format!("{} predictions for {} labels", pred.len(), truth.len()),
            ));
        }
        if let Some(&p) = pred.iter().find(|&&p| p as usize >= self.k) {
            return Err(Error::Invalid(format!("prediction {p} out of range for {} classes", self.k)));
        }
        if let Some(&t) = truth.iter().find(|&&t| t != IGNORE_INDEX && t as usize >= self.k) {
            return Err(Error::Invalid(format!("label {t} out of range for {} classes", self.k)));
        }
        for (&p, &t) in pred.iter().zip(truth) {
            if t != IGNORE_INDEX {
                self.counts[t as usize * self.k + p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::shape("merge", format!("{} vs {} classes", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `(tp, fp, fn)` for one class.
    pub fn class_counts(&self, c: usize) -> (u64, u64, u64) {
        let tp = self.get(c, c);
        let col: u64 = (0..self.k).map(|t| self.get(t, c)).sum();
        let row: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
        (tp, col - tp, row - tp)
    }

    /// IoU of class `c`, or `None` when the class is absent from both
    /// predictions and ground truth.
    pub fn iou(&self, c: usize) -> Option<f64> {
        let (tp, fp, fn_) = self.class_counts(c);
        let denom = tp + fp + fn_;
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    pub fn report(&self, subset: Option<&[usize]>) -> Result<IouReport> {
        let classes: Vec<usize> = match subset {
            Some(s) => {
                if let Some(&c) = s.iter().find(|&&c| c >= self.k) {
                    return Err(Error::Invalid(format!("class {c} out of range for {} classes", self.k)));
                }
                s.to_vec()
            }
            None => (0..self.k).collect(),
        };
        let per_class: Vec<(usize, Option<f64>)> = classes.iter().map(|&c| (c, self.iou(c))).collect();
        let scored: Vec<f64> = per_class.iter().filter_map(|&(_, v)| v).collect();
        if scored.is_empty() {
            return Err(Error::Invalid("no class in the evaluated set has any pixels".into()));
        }
        let mean = scored.iter().sum::<f64>() / scored.len() as f64;
        Ok(IouReport { per_class, mean })
    }
}

/// Per-class IoU (unscored classes as `None`) and their mean.
#[derive(Debug, Clone, PartialEq)]
pub struct IouReport {
    pub per_class: Vec<(usize, Option<f64>)>,
    pub mean: f64,
}

impl IouReport {
    /// `class,iou` rows then a `mIoU,<value>` footer; unscored classes have
    /// an empty iou field.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,iou\n");
        for &(c, v) in &self.per_class {
            match v {
                Some(v) => writeln!(out, "{c},{v:.6}").unwrap(),
                None => writeln!(out, "{c},").unwrap(),
            }
        }
        writeln!(out, "mIoU,{:.6}", self.mean).unwrap();
        out
    }
}

/// Parses a comma-separated class list such as `1,2,4`.
pub fn parse_class_subset(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| Error::Invalid(format!("bad class index '{s}'"))))
        .collect()
}
