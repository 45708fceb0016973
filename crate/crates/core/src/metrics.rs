//! Pixel-level segmentation metrics derived from confusion counts.
//!
//! Every ratio is computed as one integer division, so values are the
//! correctly rounded `f64` of the exact fraction. Empty denominators follow
//! fixed conventions instead of producing NaN:
//!
//! * IoU of a class that is absent and never predicted is 1.
//! * Precision with no positive predictions is 1.
//! * Recall with no positive ground truth is 1.
//! * F1 is 0 when precision + recall is 0.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask_ops::BinaryMask;

/// Pixel tallies with road as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub const fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Tallies one (prediction, ground truth) pixel pair.
    #[inline]
    pub fn record(&mut self, pred: bool, gt: bool) {
        match (pred, gt) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Counts with prediction and ground truth exchanged.
    pub fn transposed(&self) -> Self {
        Self::new(self.tp, self.fn_, self.fp, self.tn)
    }

    fn ensure_nonempty(&self) -> Result<()> {
        if self.total() == 0 {
            return Err(Error::Degenerate("confusion counts cover zero pixels".into()));
        }
        Ok(())
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(self.tp + o.tp, self.fp + o.fp, self.fn_ + o.fn_, self.tn + o.tn)
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegClass {
    Road,
    Background,
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape(format!(
            "prediction is {}x{} but ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        c.record(p == 1, g == 1);
    }
    Ok(c)
}

#[inline]
fn ratio_or(num: u64, den: u64, empty: f64) -> f64 {
    if den == 0 {
        empty
    } else {
        num as f64 / den as f64
    }
}

pub fn pixel_accuracy(c: &ConfusionCounts) -> Result<f64> {
    c.ensure_nonempty()?;
    Ok((c.tp + c.tn) as f64 / c.total() as f64)
}

pub fn iou(c: &ConfusionCounts, class: SegClass) -> Result<f64> {
    c.ensure_nonempty()?;
    let (hit, miss) = match class {
        SegClass::Road => (c.tp, c.fp + c.fn_),
        SegClass::Background => (c.tn, c.fp + c.fn_),
    };
    Ok(ratio_or(hit, hit + miss, 1.0))
}

pub fn precision(c: &ConfusionCounts) -> Result<f64> {
    c.ensure_nonempty()?;
    Ok(ratio_or(c.tp, c.tp + c.fp, 1.0))
}

pub fn recall(c: &ConfusionCounts) -> Result<f64> {
    c.ensure_nonempty()?;
    Ok(ratio_or(c.tp, c.tp + c.fn_, 1.0))
}

/// Harmonic mean of precision and recall.
///
/// With both defined this is `2tp / (2tp + fp + fn)`; the degenerate
/// conventions reduce to the same expression with 0/0 read as 1 (nothing to
/// find and nothing predicted).
pub fn f1(c: &ConfusionCounts) -> Result<f64> {
    c.ensure_nonempty()?;
    Ok(ratio_or(2 * c.tp, 2 * c.tp + c.fp + c.fn_, 1.0))
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of the road and background IoU, evaluated as one fraction so the
/// result is the correctly rounded value whenever the reduced numerator and
/// denominator fit in 53 bits (always the case below ~9e7 pixels per class
/// union; beyond that the error is at most a couple of ulps).
pub fn mean_iou(c: &ConfusionCounts) -> Result<f64> {
    c.ensure_nonempty()?;
    let miss = (c.fp + c.fn_) as u128;
    let part = |hit: u64| match hit as u128 + miss {
        0 => (1, 1),
        den => (hit as u128, den),
    };
    let (nr, dr) = part(c.tp);
    let (nb, db) = part(c.tn);
    let (num, den) = (nr * db + nb * dr, 2 * dr * db);
    let g = gcd(num, den).max(1);
    Ok((num / g) as f64 / (den / g) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub pixel_accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou_road: f64,
    pub iou_background: f64,
    pub miou: f64,
    pub counts: ConfusionCounts,
}

impl MetricsReport {
    /// Column names used for tabular output, in order.
    pub const FIELDS: [&'static str; 11] = [
        "pixel_accuracy",
        "precision",
        "recall",
        "f1",
        "iou_road",
        "iou_background",
        "miou",
        "tp",
        "fp",
        "fn",
        "tn",
    ];

    pub fn metric_values(&self) -> [f64; 7] {
        [
            self.pixel_accuracy,
            self.precision,
            self.recall,
            self.f1,
            self.iou_road,
            self.iou_background,
            self.miou,
        ]
    }
}

pub fn report(c: &ConfusionCounts) -> Result<MetricsReport> {
    Ok(MetricsReport {
        pixel_accuracy: pixel_accuracy(c)?,
        precision: precision(c)?,
        recall: recall(c)?,
        f1: f1(c)?,
        iou_road: iou(c, SegClass::Road)?,
        iou_background: iou(c, SegClass::Background)?,
        miou: mean_iou(c)?,
        counts: *c,
    })
}
