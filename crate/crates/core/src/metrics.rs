//! Confusion counts, overlap scores and threshold-sweep metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{BinaryMask, Volume3D};

/// Thresholds swept by [`average_precision`].
pub const AP_THRESHOLDS: usize = 256;
/// Thresholds `i/100, i = 1..=99` swept by [`miou`].
pub const MIOU_THRESHOLDS: usize = 99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("confusion", format!("prediction {} vs ground truth {}", pred.shape(), gt.shape())));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p != 0, g != 0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scores {
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ji: f64,
    pub dice: f64,
    /// Names of the scores whose formula was 0/0 and were reported as 0.
    pub degenerate: Vec<String>,
}

fn ratio(num: u64, den: u64, name: &str, flags: &mut Vec<String>) -> f64 {
    if den == 0 {
        flags.push(name.to_string());
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn scores(c: &ConfusionCounts) -> Scores {
    let mut flags = Vec::new();
    let sensitivity = ratio(c.tp, c.tp + c.fn_, "sensitivity", &mut flags);
    let specificity = ratio(c.tn, c.tn + c.fp, "specificity", &mut flags);
    let ji = ratio(c.tp, c.tp + c.fp + c.fn_, "ji", &mut flags);
    let dice = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, "dice", &mut flags);
    let precision = if c.tp + c.fp == 0 { 0.0 } else { c.tp as f64 / (c.tp + c.fp) as f64 };
    let f1 = if precision + sensitivity == 0.0 {
        flags.push("f1".to_string());
        0.0
    } else {
        2.0 * precision * sensitivity / (precision + sensitivity)
    };
    Scores { f1, sensitivity, specificity, ji, dice, degenerate: flags }
}

fn check_pair(op: &'static str, s: &Volume3D, gt: &BinaryMask) -> Result<()> {
    if s.shape() != gt.shape() {
        return Err(Error::shape(op, format!("scores {} vs ground truth {}", s.shape(), gt.shape())));
    }
    if gt.count_ones() == 0 {
        return Err(Error::InvalidArgument(format!("{op}: ground truth has no foreground")));
    }
    Ok(())
}

/// `(tp, fp)` of the mask `s > t` for each threshold.
fn sweep(s: &Volume3D, gt: &BinaryMask, thresholds: &[f64]) -> Vec<(u64, u64)> {
    thresholds
        .iter()
        .map(|&t| {
            let mut tp = 0;
            let mut fp = 0;
            for (&v, &g) in s.data().iter().zip(gt.data()) {
                if v as f64 > t {
                    if g != 0 {
                        tp += 1;
                    } else {
                        fp += 1;
                    }
                }
            }
            (tp, fp)
        })
        .collect()
}

/// `n` uniform thresholds `i/(n+1)`, `i = 1..=n`.
pub fn uniform_thresholds(n: usize) -> Vec<f64> {
    (1..=n).map(|i| i as f64 / (n + 1) as f64).collect()
}

/// Area under the precision-recall step function over `n_thresholds`
/// uniform thresholds, walked from high to low threshold so recall ascends.
pub fn average_precision_with(s: &Volume3D, gt: &BinaryMask, n_thresholds: usize) -> Result<f64> {
    check_pair("average_precision", s, gt)?;
    let positives = gt.count_ones() as f64;
    let thresholds = uniform_thresholds(n_thresholds);
    let counts = sweep(s, gt, &thresholds);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(tp, fp) in counts.iter().rev() {
        let recall = tp as f64 / positives;
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

pub fn average_precision(s: &Volume3D, gt: &BinaryMask) -> Result<f64> {
    average_precision_with(s, gt, AP_THRESHOLDS)
}

/// Mean Jaccard index of `s > t` over `thresholds`.
pub fn miou_with(s: &Volume3D, gt: &BinaryMask, thresholds: &[f64]) -> Result<f64> {
    check_pair("miou", s, gt)?;
    if thresholds.is_empty() {
        return Err(Error::InvalidArgument("miou: empty threshold grid".into()));
    }
    let positives = gt.count_ones() as u64;
    let total: f64 = sweep(s, gt, thresholds)
        .into_iter()
        .map(|(tp, fp)| {
            let den = positives + fp;
            if den == 0 {
                0.0
            } else {
                tp as f64 / den as f64
            }
        })
        .sum();
    Ok(total / thresholds.len() as f64)
}

pub fn miou(s: &Volume3D, gt: &BinaryMask) -> Result<f64> {
    let grid: Vec<f64> = (1..=MIOU_THRESHOLDS).map(|i| i as f64 / 100.0).collect();
    miou_with(s, gt, &grid)
}

/// One evaluation in the column order AP, F1, Sensitivity, Specificity, JI,
/// DICE, mIoU, plus the settings it was computed with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ap: f64,
    pub f1: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub ji: f64,
    pub dice: f64,
    pub miou: f64,
    pub threshold: f64,
    pub ap_thresholds: usize,
    pub miou_thresholds: usize,
    pub counts: ConfusionCounts,
    pub degenerate: Vec<String>,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "AP,F1,Sensitivity,Specificity,JI,DICE,mIoU";

    pub fn to_csv(&self) -> String {
        format!(
            "{}\n{},{},{},{},{},{},{}\n",
            Self::CSV_HEADER,
            self.ap,
            self.f1,
            self.sensitivity,
            self.specificity,
            self.ji,
            self.dice,
            self.miou
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// All metrics of scores `s` against `gt`, with `s > threshold` as the mask.
pub fn evaluate(s: &Volume3D, gt: &BinaryMask, threshold: f64) -> Result<MetricsReport> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {threshold} outside (0, 1)")));
    }
    check_pair("evaluate", s, gt)?;
    let pred = BinaryMask::new(s.shape(), s.data().iter().map(|&v| (v as f64 > threshold) as u8).collect())?;
    let counts = confusion(&pred, gt)?;
    let sc = scores(&counts);
    debug_assert!((sc.f1 - sc.dice).abs() < 1e-12);
    Ok(MetricsReport {
        ap: average_precision(s, gt)?,
        f1: sc.f1,
        sensitivity: sc.sensitivity,
        specificity: sc.specificity,
        ji: sc.ji,
        dice: sc.dice,
        miou: miou(s, gt)?,
        threshold,
        ap_thresholds: AP_THRESHOLDS,
        miou_thresholds: MIOU_THRESHOLDS,
        counts,
        degenerate: sc.degenerate,
    })
}
