//! Shadow detection metrics: MAE, F-measure, IoU and the balanced error rate
//! with its shadow / non-shadow components.

mod evaluate;

pub use evaluate::{
    evaluate, EvalIssue, EvalSettings, Evaluator, FrameMetrics, MetricsReport, Summary,
    VideoMetrics,
};

use serde::{Deserialize, Serialize};

use crate::data_io::{MaskKind, ShadowMask};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Shadow pixels in the ground truth.
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    /// Non-shadow pixels in the ground truth.
    pub fn negatives(&self) -> u64 {
        self.tn + self.fp
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl std::ops::Add for ConfusionCounts {
    type Output = ConfusionCounts;
    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl std::iter::Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(ConfusionCounts::default(), |a, b| a + b)
    }
}

pub fn confusion(pred: &ShadowMask, gt: &ShadowMask) -> Result<ConfusionCounts> {
    pred.check_same_shape(gt)?;
    if pred.kind() != MaskKind::Binary || gt.kind() != MaskKind::Binary {
        return Err(Error::Contract("confusion counts need binary masks".into()));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        match (p >= 0.5, g >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Mean absolute difference between `pred` (any kind) and `gt`.
pub fn mae(pred: &ShadowMask, gt: &ShadowMask) -> Result<f64> {
    pred.check_same_shape(gt)?;
    if pred.is_empty() {
        return Err(Error::Contract("empty mask".into()));
    }
    let sum: f64 = pred
        .values()
        .iter()
        .zip(gt.values())
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum();
    Ok(sum / pred.len() as f64)
}

/// Weighted harmonic mean of precision and recall; 0 without true positives.
pub fn f_beta(counts: &ConfusionCounts, beta_sq: f64) -> f64 {
    if counts.tp == 0 {
        return 0.0;
    }
    let p = counts.tp as f64 / (counts.tp + counts.fp) as f64;
    let r = counts.tp as f64 / (counts.tp + counts.fn_) as f64;
    (1.0 + beta_sq) * p * r / (beta_sq * p + r)
}

/// `TP / (TP + FP + FN)`; 1 when prediction and ground truth are both empty.
pub fn iou(counts: &ConfusionCounts) -> f64 {
    let denom = counts.tp + counts.fp + counts.fn_;
    if denom == 0 {
        1.0
    } else {
        counts.tp as f64 / denom as f64
    }
}

/// BER and its components, in percent. A component is `None` when its ground
/// truth class is absent; BER is `None` unless both components exist.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BerFamily {
    pub ber: Option<f64>,
    pub sber: Option<f64>,
    pub nber: Option<f64>,
}

impl BerFamily {
    pub fn from_components(sber: Option<f64>, nber: Option<f64>) -> Self {
        let ber = match (sber, nber) {
            (Some(s), Some(n)) => Some((s + n) / 2.0),
            _ => None,
        };
        BerFamily { ber, sber, nber }
    }
}

pub fn ber_family(counts: &ConfusionCounts) -> BerFamily {
    let np = counts.positives();
    let nn = counts.negatives();
    let sber = (np > 0).then(|| 100.0 * (1.0 - counts.tp as f64 / np as f64));
    let nber = (nn > 0).then(|| 100.0 * (1.0 - counts.tn as f64 / nn as f64));
    BerFamily::from_components(sber, nber)
}
