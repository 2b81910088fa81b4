//! Confusion counts and the segmentation scores derived from them.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::raster::LabelMask;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch((usize, usize), (usize, usize)),
    #[error("class {class} outside 0..{n_classes}")]
    OutOfRangeClass { class: u8, n_classes: usize },
    #[error("no class present in prediction or truth")]
    NoClassesPresent,
}

/// Per-class true positives, false positives and false negatives.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    pub fn_: Vec<u64>,
}

impl ConfusionCounts {
    pub fn zeros(n_classes: usize) -> Self {
        Self {
            tp: vec![0; n_classes],
            fp: vec![0; n_classes],
            fn_: vec![0; n_classes],
        }
    }

    pub fn n_classes(&self) -> usize {
        self.tp.len()
    }

    /// Adds another tally in place; merging is associative and commutative.
    pub fn merge(&mut self, other: &ConfusionCounts) {
        assert_eq!(self.n_classes(), other.n_classes(), "class count mismatch");
        for c in 0..self.n_classes() {
            self.tp[c] += other.tp[c];
            self.fp[c] += other.fp[c];
            self.fn_[c] += other.fn_[c];
        }
    }

    pub fn accumulate(&mut self, pred: ArrayView2<u8>, truth: ArrayView2<u8>) -> Result<(), MetricsError> {
        if pred.dim() != truth.dim() {
            return Err(MetricsError::ShapeMismatch(pred.dim(), truth.dim()));
        }
        let k = self.n_classes();
        for (&p, &t) in pred.iter().zip(truth.iter()) {
            for class in [p, t] {
                if class as usize >= k {
                    return Err(MetricsError::OutOfRangeClass { class, n_classes: k });
                }
            }
            if p == t {
                self.tp[p as usize] += 1;
            } else {
                self.fp[p as usize] += 1;
                self.fn_[t as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn iou(&self, class: usize) -> Option<f64> {
        let denom = self.tp[class] + self.fp[class] + self.fn_[class];
        (denom > 0).then(|| self.tp[class] as f64 / denom as f64)
    }
}

pub fn confusion_counts(pred: &LabelMask, truth: &LabelMask, n_classes: usize) -> Result<ConfusionCounts, MetricsError> {
    let mut counts = ConfusionCounts::zeros(n_classes);
    counts.accumulate(pred.data().view(), truth.data().view())?;
    Ok(counts)
}

/// Mean IoU over classes that occur in prediction or truth.
pub fn miou(counts: &ConfusionCounts) -> Result<f64, MetricsError> {
    let ious: Vec<f64> = (0..counts.n_classes()).filter_map(|c| counts.iou(c)).collect();
    if ious.is_empty() {
        return Err(MetricsError::NoClassesPresent);
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Micro-averaged precision, recall and F1 (zero on empty denominators).
pub fn precision_recall_f1(counts: &ConfusionCounts) -> (f64, f64, f64) {
    let tp: u64 = counts.tp.iter().sum();
    let fp: u64 = counts.fp.iter().sum();
    let fn_: u64 = counts.fn_.iter().sum();
    let p = ratio(tp, tp + fp);
    let r = ratio(tp, tp + fn_);
    (p, r, harmonic(p, r))
}

/// Per-class precision/recall/F1 averaged over classes.
pub fn macro_precision_recall_f1(counts: &ConfusionCounts) -> (f64, f64, f64) {
    let k = counts.n_classes().max(1) as f64;
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..counts.n_classes() {
        let p = ratio(counts.tp[c], counts.tp[c] + counts.fp[c]);
        let r = ratio(counts.tp[c], counts.tp[c] + counts.fn_[c]);
        sp += p;
        sr += r;
        sf += harmonic(p, r);
    }
    (sp / k, sr / k, sf / k)
}

/// The JSON metrics report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub miou: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_recall: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    pub fn from_counts(counts: &ConfusionCounts) -> Result<Self, MetricsError> {
        let m = miou(counts)?;
        let (precision, recall, f1) = precision_recall_f1(counts);
        let (macro_precision, macro_recall, macro_f1) = macro_precision_recall_f1(counts);
        Ok(Self {
            miou: m,
            precision,
            recall,
            f1,
            per_class_iou: (0..counts.n_classes()).map(|c| counts.iou(c)).collect(),
            per_class_recall: (0..counts.n_classes())
                .map(|c| ratio(counts.tp[c], counts.tp[c] + counts.fn_[c]))
                .collect(),
            macro_precision,
            macro_recall,
            macro_f1,
            counts: counts.clone(),
        })
    }
}
