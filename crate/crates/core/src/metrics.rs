//! Road segmentation metrics: F-measure, threshold sweep, AP, IoU family.
//!
//! Road is the positive class. A pixel is predicted road at threshold `t`
//! when its confidence is strictly greater than `t`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("prediction has {pred} pixels but ground truth has {gt}")]
    LengthMismatch { pred: usize, gt: usize },
    #[error("{what} value {value} at index {index} is not binary")]
    NonBinary {
        what: &'static str,
        value: u8,
        index: usize,
    },
    #[error("confidence {value} at index {index} is outside [0, 1]")]
    Confidence { value: f32, index: usize },
    #[error("threshold grid needs at least 2 levels, got {0}")]
    Levels(usize),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

pub const DEFAULT_LEVELS: usize = 256;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Counts with the roles of road and background exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            tp: self.tn,
            fp: self.fn_,
            fn_: self.fp,
            tn: self.tp,
        }
    }

    /// 0 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    /// 0 when there are no positives.
    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }

    pub fn fpr(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    pub fn fnr(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// Positive-class IoU; 1 when the class is absent from both masks.
    pub fn iou(&self) -> f64 {
        let den = self.tp + self.fp + self.fn_;
        if den == 0 {
            1.0
        } else {
            self.tp as f64 / den as f64
        }
    }

    pub fn add(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

fn check_binary(what: &'static str, mask: &[u8]) -> Result<()> {
    match mask.iter().position(|&v| v > 1) {
        Some(index) => Err(MetricsError::NonBinary {
            what,
            value: mask[index],
            index,
        }),
        None => Ok(()),
    }
}

fn check_lengths(pred: usize, gt: usize) -> Result<()> {
    if pred != gt {
        return Err(MetricsError::LengthMismatch { pred, gt });
    }
    Ok(())
}

/// Pixel counts for binary masks of equal length.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    check_lengths(pred.len(), gt.len())?;
    check_binary("prediction", pred)?;
    check_binary("ground truth", gt)?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, _) => c.fp += 1,
            (_, 1) => c.fn_ += 1,
            _ => c.tn += 1,
        }
    }
    Ok(c)
}

/// F-measure from precision and recall; 0 when both are 0.
pub fn fbeta_from(pre: f64, rec: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    let den = b2 * pre + rec;
    if pre + rec == 0.0 || den == 0.0 {
        0.0
    } else {
        (1.0 + b2) * pre * rec / den
    }
}

pub fn fbeta(counts: &ConfusionCounts, beta: f64) -> f64 {
    fbeta_from(counts.precision(), counts.recall(), beta)
}

/// Mean of road and background IoU.
pub fn miou(counts: &ConfusionCounts) -> f64 {
    0.5 * (counts.iou() + counts.swapped().iou())
}

/// Confusion counts at every level of a uniform threshold grid
/// `t_i = i / (levels - 1)`. Sweeps over several images add up.
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdSweep {
    thresholds: Vec<f32>,
    counts: Vec<ConfusionCounts>,
}

impl ThresholdSweep {
    pub fn new(levels: usize) -> Result<Self> {
        if levels < 2 {
            return Err(MetricsError::Levels(levels));
        }
        let top = (levels - 1) as f32;
        Ok(Self {
            thresholds: (0..levels).map(|i| i as f32 / top).collect(),
            counts: vec![ConfusionCounts::default(); levels],
        })
    }

    pub fn from_map(confidence: &[f32], gt: &[u8], levels: usize) -> Result<Self> {
        let mut s = Self::new(levels)?;
        s.accumulate(confidence, gt)?;
        Ok(s)
    }

    pub fn thresholds(&self) -> &[f32] {
        &self.thresholds
    }

    pub fn counts(&self) -> &[ConfusionCounts] {
        &self.counts
    }

    pub fn accumulate(&mut self, confidence: &[f32], gt: &[u8]) -> Result<()> {
        check_lengths(confidence.len(), gt.len())?;
        check_binary("ground truth", gt)?;
        if let Some(index) = confidence.iter().position(|c| !(0.0..=1.0).contains(c)) {
            return Err(MetricsError::Confidence {
                value: confidence[index],
                index,
            });
        }
        let levels = self.thresholds.len();
        // hist[a][g]: pixels accepted by exactly the first `a` thresholds
        let mut hist = vec![[0u64; 2]; levels + 1];
        for (&c, &g) in confidence.iter().zip(gt) {
            let accepted = self.thresholds.partition_point(|&t| t < c);
            hist[accepted][g as usize] += 1;
        }
        let pos: u64 = hist.iter().map(|h| h[1]).sum();
        let neg: u64 = hist.iter().map(|h| h[0]).sum();
        let (mut tp, mut fp) = (0u64, 0u64);
        for i in (0..levels).rev() {
            tp += hist[i + 1][1];
            fp += hist[i + 1][0];
            let c = &mut self.counts[i];
            c.tp += tp;
            c.fp += fp;
            c.fn_ += pos - tp;
            c.tn += neg - fp;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ThresholdSweep) {
        assert_eq!(
            self.thresholds.len(),
            other.thresholds.len(),
            "grid mismatch"
        );
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            a.add(b);
        }
    }

    /// Index of the best F1; the smallest threshold wins ties.
    pub fn best_index(&self) -> usize {
        let mut best = 0;
        let mut best_f = f64::NEG_INFINITY;
        for (i, c) in self.counts.iter().enumerate() {
            let f = fbeta(c, 1.0);
            if f > best_f {
                best_f = f;
                best = i;
            }
        }
        best
    }

    pub fn maxf(&self) -> (f64, f32) {
        let i = self.best_index();
        (fbeta(&self.counts[i], 1.0), self.thresholds[i])
    }

    /// 11-point interpolated average precision over recall levels
    /// 0.0, 0.1, ..., 1.0.
    pub fn average_precision(&self) -> f64 {
        let points: Vec<(f64, f64)> = self
            .counts
            .iter()
            .map(|c| (c.recall(), c.precision()))
            .collect();
        (0..=10)
            .map(|r| {
                let level = r as f64 / 10.0;
                points
                    .iter()
                    .filter(|(rec, _)| *rec >= level)
                    .map(|&(_, pre)| pre)
                    .fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 11.0
    }

    pub fn report(&self) -> MetricsReport {
        let i = self.best_index();
        let c = &self.counts[i];
        MetricsReport {
            maxf: fbeta(c, 1.0),
            maxf_threshold: self.thresholds[i] as f64,
            ap: self.average_precision(),
            pre: c.precision(),
            rec: c.recall(),
            f1: fbeta(c, 1.0),
            f2: fbeta(c, 2.0),
            fpr: c.fpr(),
            fnr: c.fnr(),
            miou: miou(c),
            acc: c.accuracy(),
            counts: *c,
        }
    }
}

/// Metric family evaluated at the MaxF threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub maxf: f64,
    pub maxf_threshold: f64,
    pub ap: f64,
    pub pre: f64,
    pub rec: f64,
    pub f1: f64,
    pub f2: f64,
    pub fpr: f64,
    pub fnr: f64,
    pub miou: f64,
    pub acc: f64,
    pub counts: ConfusionCounts,
}

pub fn maxf(confidence: &[f32], gt: &[u8]) -> Result<(f64, f32)> {
    Ok(ThresholdSweep::from_map(confidence, gt, DEFAULT_LEVELS)?.maxf())
}

pub fn average_precision(confidence: &[f32], gt: &[u8]) -> Result<f64> {
    Ok(ThresholdSweep::from_map(confidence, gt, DEFAULT_LEVELS)?.average_precision())
}

pub fn evaluate(confidence: &[f32], gt: &[u8]) -> Result<MetricsReport> {
    Ok(ThresholdSweep::from_map(confidence, gt, DEFAULT_LEVELS)?.report())
}
