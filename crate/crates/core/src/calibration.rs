//! Expected calibration error and reliability-diagram data.
//!
//! Confidence is the top softmax probability at temperature 1. Bin `m` of
//! `M` covers `(m/M, (m+1)/M]`, except bin 0 which also includes its left
//! edge. Sums inside a bin run over confidences in ascending order, so every
//! report field is independent of sample order.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// Zero for an empty bin.
    pub accuracy: f64,
    /// Zero for an empty bin.
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub num_bins: usize,
    pub num_samples: usize,
    pub bins: Vec<CalibrationBin>,
    pub ece: f64,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

/// Per-bin counts plus the overall accuracy and confidence markers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub accuracy: f64,
    pub mean_confidence: f64,
}

/// `(predicted class, confidence)` per row of `logits`. Ties in the argmax
/// resolve to the lowest class index.
pub fn predictions(logits: &Tensor) -> Vec<(usize, f64)> {
    let c = logits.cols();
    (0..logits.rows())
        .map(|i| {
            let row = logits.row(i);
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            let m = row[best];
            let total = row.iter().fold(0.0, |acc, &z| acc + math::exp(z - m));
            (best, 1.0 / total)
        })
        .collect()
}

fn edge(m: usize, bins: usize) -> f64 {
    m as f64 / bins as f64
}

/// Bin index for a confidence in `[0, 1]`.
pub fn bin_index(conf: f64, bins: usize) -> usize {
    let mut idx = (libm::ceil(conf * bins as f64) as usize)
        .saturating_sub(1)
        .min(bins - 1);
    while idx > 0 && conf <= edge(idx, bins) {
        idx -= 1;
    }
    while idx + 1 < bins && conf > edge(idx + 1, bins) {
        idx += 1;
    }
    idx
}

fn check_inputs(logits: &Tensor, labels: &[usize], bins: usize) -> Result<()> {
    if bins < 1 {
        return Err(param_err("num_bins", "need at least one bin"));
    }
    if logits.shape().len() != 2 || logits.rows() != labels.len() {
        return Err(Error::Data(format!(
            "{} labels for logits of shape {:?}",
            labels.len(),
            logits.shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= logits.cols()) {
        return Err(Error::Data(format!(
            "label {bad} out of range for {} classes",
            logits.cols()
        )));
    }
    Ok(())
}

fn sorted_sum(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().fold(0.0, |acc, &x| acc + x)
}

/// Partitions predictions into `bins` equal-width confidence bins and fills
/// in per-bin accuracy/confidence and the ECE.
pub fn bin_predictions(logits: &Tensor, labels: &[usize], bins: usize) -> Result<CalibrationReport> {
    check_inputs(logits, labels, bins)?;
    let n = labels.len();
    let mut confs: Vec<Vec<f64>> = vec![Vec::new(); bins];
    let mut correct = vec![0usize; bins];
    for ((pred, conf), &y) in predictions(logits).into_iter().zip(labels) {
        let b = bin_index(conf, bins);
        confs[b].push(conf);
        if pred == y {
            correct[b] += 1;
        }
    }
    let mut all: Vec<f64> = confs.iter().flatten().copied().collect();
    let total_correct: usize = correct.iter().sum();
    let bins_out: Vec<CalibrationBin> = confs
        .iter_mut()
        .zip(&correct)
        .enumerate()
        .map(|(m, (cs, &k))| {
            let count = cs.len();
            let (accuracy, confidence) = if count == 0 {
                (0.0, 0.0)
            } else {
                (k as f64 / count as f64, sorted_sum(cs) / count as f64)
            };
            CalibrationBin {
                lo: edge(m, bins),
                hi: edge(m + 1, bins),
                count,
                accuracy,
                confidence,
            }
        })
        .collect();
    let mut report = CalibrationReport {
        num_bins: bins,
        num_samples: n,
        bins: bins_out,
        ece: 0.0,
        accuracy: total_correct as f64 / n as f64,
        mean_confidence: sorted_sum(&mut all) / n as f64,
    };
    report.ece = ece(&report);
    Ok(report)
}

/// `Σ_m (|B_m| / n) · |acc(B_m) − conf(B_m)|`; empty bins contribute nothing.
pub fn ece(report: &CalibrationReport) -> f64 {
    if report.num_samples == 0 {
        return 0.0;
    }
    let n = report.num_samples as f64;
    report.bins.iter().fold(0.0, |acc, b| {
        acc + (b.count as f64 / n) * (b.accuracy - b.confidence).abs()
    })
}

pub fn confidence_histogram(logits: &Tensor, labels: &[usize], bins: usize) -> Result<ConfidenceHistogram> {
    let report = bin_predictions(logits, labels, bins)?;
    Ok(ConfidenceHistogram {
        edges: (0..=bins).map(|m| edge(m, bins)).collect(),
        counts: report.bins.iter().map(|b| b.count).collect(),
        accuracy: report.accuracy,
        mean_confidence: report.mean_confidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-class logits whose softmax confidence for class `cls` is `p`.
    fn logit_row(p: f64, cls: usize) -> [f64; 2] {
        let hi = math::ln(p);
        let lo = math::ln(1.0 - p);
        if cls == 0 {
            [hi, lo]
        } else {
            [lo, hi]
        }
    }

    #[test]
    fn bin_boundaries() {
        assert_eq!(bin_index(0.5, 10), 4);
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(0.1, 10), 0);
        assert_eq!(bin_index(0.3, 10), 2);
        assert_eq!(bin_index(0.30000000000000004, 10), 3);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.7, 1), 0);
    }

    #[test]
    fn confident_and_correct() {
        let logits = Tensor::from_rows(&[[800.0, 0.0], [0.0, 800.0]]).unwrap();
        let r = bin_predictions(&logits, &[0, 1], 10).unwrap();
        let populated: Vec<_> = r.bins.iter().filter(|b| b.count > 0).collect();
        assert_eq!(populated.len(), 1);
        assert_eq!(populated[0].accuracy, 1.0);
        assert_eq!(populated[0].confidence, 1.0);
        assert_eq!(r.ece, 0.0);
    }

    #[test]
    fn confident_half_correct() {
        let logits = Tensor::from_rows(&[[800.0, 0.0], [800.0, 0.0], [0.0, 800.0], [0.0, 800.0]]).unwrap();
        let r = bin_predictions(&logits, &[0, 1, 1, 0], 10).unwrap();
        assert_eq!(r.ece, 0.5);
    }

    #[test]
    fn single_bin_ece_is_accuracy_confidence_gap() {
        let rows: Vec<[f64; 2]> = [(0.9, 0), (0.6, 1), (0.75, 0), (0.55, 1)]
            .iter()
            .map(|&(p, c)| logit_row(p, c))
            .collect();
        let logits = Tensor::from_rows(&rows).unwrap();
        let labels = [0, 0, 0, 1];
        let r = bin_predictions(&logits, &labels, 1).unwrap();
        assert!((r.ece - (r.accuracy - r.mean_confidence).abs()).abs() < 1e-15);
    }

    #[test]
    fn counts_sum_and_uniform_logits() {
        let logits = Tensor::from_rows(&[[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]]).unwrap();
        let h = confidence_histogram(&logits, &[0, 2], 10).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 2);
        // 1/3 lands in (0.3, 0.4]
        assert_eq!(h.counts[3], 2);
        assert_eq!(h.edges.len(), 11);
    }

    #[test]
    fn input_errors() {
        let logits = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        assert!(matches!(
            bin_predictions(&logits, &[0], 0),
            Err(Error::Parameter { .. })
        ));
        assert!(matches!(bin_predictions(&logits, &[0, 1], 10), Err(Error::Data(_))));
        assert!(matches!(bin_predictions(&logits, &[2], 10), Err(Error::Data(_))));
    }

    #[test]
    fn sample_order_does_not_matter() {
        let rows: Vec<[f64; 2]> = [(0.91, 0), (0.62, 1), (0.77, 0), (0.55, 1), (0.93, 1), (0.68, 0)]
            .iter()
            .map(|&(p, c)| logit_row(p, c))
            .collect();
        let labels = [0, 1, 1, 0, 1, 1];
        let a = bin_predictions(&Tensor::from_rows(&rows).unwrap(), &labels, 10).unwrap();
        let perm = [5, 3, 1, 0, 4, 2];
        let rows_p: Vec<[f64; 2]> = perm.iter().map(|&i| rows[i]).collect();
        let labels_p: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
        let b = bin_predictions(&Tensor::from_rows(&rows_p).unwrap(), &labels_p, 10).unwrap();
        assert_eq!(a, b);
    }
}
