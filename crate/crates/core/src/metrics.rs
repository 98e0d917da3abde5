//! Calibration and discrimination metrics.
//!
//! ECE and MCE use `M` equal-width confidence bins `[(m−1)/M, m/M)` with the
//! last bin closed at 1. AECE uses `M` equal-count bins over the
//! confidence-sorted samples. AUROC and FPR95 treat in-distribution samples
//! as positives that should score higher.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{argmax, Matrix};
use crate::losses::LOG_FLOOR;
use crate::scalar::Real;

/// Default number of calibration bins.
pub const DEFAULT_BINS: usize = 15;

/// Row-stochastic predictions with their true labels.
#[derive(Debug, Clone)]
pub struct PredictionSet<T> {
    probs: Matrix<T>,
    labels: Vec<usize>,
}

impl<T: Real> PredictionSet<T> {
    pub fn new(probs: Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        if probs.rows() != labels.len() {
            return Err(Error::shape(
                "PredictionSet::new",
                format!("{} rows for {} labels", probs.rows(), labels.len()),
            ));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= probs.cols()) {
            return Err(Error::domain(format!("label {y} outside [0, {})", probs.cols())));
        }
        Ok(Self { probs, labels })
    }

    pub fn from_logits(logits: &Matrix<T>, labels: Vec<usize>) -> Result<Self> {
        Self::new(logits.softmax_rows(), labels)
    }

    pub fn probs(&self) -> &Matrix<T> {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `p̂_i = max_k p_{i,k}`.
    pub fn confidences(&self) -> Vec<T> {
        (0..self.len()).map(|r| self.probs.row_max(r)).collect()
    }

    /// `ŷ_i = argmax_k p_{i,k}` (lowest index on ties).
    pub fn predictions(&self) -> Vec<usize> {
        (0..self.len()).map(|r| argmax(self.probs.row(r))).collect()
    }

    pub fn correctness(&self) -> Vec<bool> {
        self.predictions()
            .iter()
            .zip(&self.labels)
            .map(|(p, y)| p == y)
            .collect()
    }

    fn require_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            return Err(Error::domain("empty prediction set"));
        }
        Ok(())
    }
}

/// One row of a reliability table.
///
/// For equal-width bins `lo`/`hi` are the interval bounds; for equal-count
/// bins they are the smallest and largest confidence inside the bin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReliabilityBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub avg_confidence: f64,
    pub avg_accuracy: f64,
}

impl ReliabilityBin {
    pub fn gap(&self) -> f64 {
        (self.avg_accuracy - self.avg_confidence).abs()
    }
}

/// Weighted gap `Σ (|B_m| / N)·|A_m − C_m|` over bins; empty bins add 0.
pub fn weighted_gap(bins: &[ReliabilityBin]) -> f64 {
    let n: usize = bins.iter().map(|b| b.count).sum();
    if n == 0 {
        return 0.0;
    }
    bins.iter()
        .filter(|b| b.count > 0)
        .map(|b| b.count as f64 / n as f64 * b.gap())
        .sum()
}

/// A binned calibration error together with the bins it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinnedError {
    pub value: f64,
    pub bins: Vec<ReliabilityBin>,
}

/// Index of the equal-width bin `[m/M, (m+1)/M)` containing `c`; 1.0 goes to
/// the last bin.
pub fn bin_index(c: f64, num_bins: usize) -> usize {
    let m = num_bins as f64;
    let mut idx = ((c * m).floor().max(0.0) as usize).min(num_bins - 1);
    // Align with the bounds as computed in floating point.
    while idx > 0 && c < idx as f64 / m {
        idx -= 1;
    }
    while idx + 1 < num_bins && c >= (idx + 1) as f64 / m {
        idx += 1;
    }
    idx
}

fn accumulate(samples: impl Iterator<Item = (f64, bool)>) -> (usize, f64, f64) {
    let (mut count, mut conf, mut acc) = (0usize, 0.0f64, 0.0f64);
    for (c, ok) in samples {
        count += 1;
        conf += c;
        if ok {
            acc += 1.0;
        }
    }
    (count, conf, acc)
}

fn make_bin(lo: f64, hi: f64, (count, conf, acc): (usize, f64, f64)) -> ReliabilityBin {
    let (avg_confidence, avg_accuracy) = if count == 0 {
        (0.0, 0.0)
    } else {
        (conf / count as f64, acc / count as f64)
    };
    ReliabilityBin {
        lo,
        hi,
        count,
        avg_confidence,
        avg_accuracy,
    }
}

/// Equal-width reliability bins.
pub fn reliability_bins<T: Real>(
    preds: &PredictionSet<T>,
    num_bins: usize,
) -> Result<Vec<ReliabilityBin>> {
    if num_bins == 0 {
        return Err(Error::domain("need at least one bin"));
    }
    preds.require_nonempty()?;
    let conf: Vec<f64> = preds.confidences().into_iter().map(Real::as_f64).collect();
    let correct = preds.correctness();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); num_bins];
    for (i, &c) in conf.iter().enumerate() {
        members[bin_index(c, num_bins)].push(i);
    }
    let m = num_bins as f64;
    Ok(members
        .iter()
        .enumerate()
        .map(|(b, idx)| {
            make_bin(
                b as f64 / m,
                (b + 1) as f64 / m,
                accumulate(idx.iter().map(|&i| (conf[i], correct[i]))),
            )
        })
        .collect())
}

/// Expected calibration error over equal-width bins.
pub fn ece<T: Real>(preds: &PredictionSet<T>, num_bins: usize) -> Result<BinnedError> {
    let bins = reliability_bins(preds, num_bins)?;
    Ok(BinnedError {
        value: weighted_gap(&bins),
        bins,
    })
}

/// Adaptive ECE over equal-count bins.
///
/// Samples are stably sorted by `(confidence, index)`; the first `N mod M`
/// groups hold `⌊N/M⌋ + 1` samples, the rest `⌊N/M⌋`.
pub fn aece<T: Real>(preds: &PredictionSet<T>, num_bins: usize) -> Result<BinnedError> {
    if num_bins == 0 {
        return Err(Error::domain("need at least one bin"));
    }
    preds.require_nonempty()?;
    let n = preds.len();
    if n < num_bins {
        return Err(Error::domain(format!(
            "adaptive ECE needs N ≥ M, got N = {n}, M = {num_bins}"
        )));
    }
    let conf: Vec<f64> = preds.confidences().into_iter().map(Real::as_f64).collect();
    let correct = preds.correctness();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| conf[a].total_cmp(&conf[b]).then(a.cmp(&b)));

    let base = n / num_bins;
    let extra = n % num_bins;
    let mut bins = Vec::with_capacity(num_bins);
    let mut start = 0;
    for b in 0..num_bins {
        let size = base + usize::from(b < extra);
        let group = &order[start..start + size];
        bins.push(make_bin(
            conf[group[0]],
            conf[group[size - 1]],
            accumulate(group.iter().map(|&i| (conf[i], correct[i]))),
        ));
        start += size;
    }
    Ok(BinnedError {
        value: weighted_gap(&bins),
        bins,
    })
}

/// Largest `|A_m − C_m|` over non-empty equal-width bins.
pub fn mce<T: Real>(preds: &PredictionSet<T>, num_bins: usize) -> Result<f64> {
    let bins = reliability_bins(preds, num_bins)?;
    Ok(max_gap(&bins))
}

pub fn max_gap(bins: &[ReliabilityBin]) -> f64 {
    bins.iter()
        .filter(|b| b.count > 0)
        .map(ReliabilityBin::gap)
        .fold(0.0, f64::max)
}

pub fn accuracy<T: Real>(preds: &PredictionSet<T>) -> Result<f64> {
    preds.require_nonempty()?;
    let hits = preds.correctness().into_iter().filter(|&ok| ok).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn avg_confidence<T: Real>(preds: &PredictionSet<T>) -> Result<f64> {
    preds.require_nonempty()?;
    Ok(running_mean(preds.confidences().into_iter().map(Real::as_f64)))
}

/// Incremental mean; exact when every value is equal.
pub fn running_mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut mean = 0.0;
    for (k, x) in values.into_iter().enumerate() {
        mean += (x - mean) / (k + 1) as f64;
    }
    mean
}

/// Mean `−ln p_{i,y_i}` with the log floor applied.
pub fn nll_metric<T: Real>(preds: &PredictionSet<T>) -> Result<f64> {
    preds.require_nonempty()?;
    let total: f64 = preds
        .labels
        .iter()
        .enumerate()
        .map(|(r, &y)| -preds.probs.get(r, y).as_f64().max(LOG_FLOOR).ln())
        .sum();
    Ok(total / preds.len() as f64)
}

/// Summary of a prediction set's accuracy and calibration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub num_samples: usize,
    pub accuracy: f64,
    pub avg_confidence: f64,
    pub ece: f64,
    pub aece: f64,
    pub mce: f64,
    pub nll: f64,
    pub num_bins: usize,
    pub bins: Vec<ReliabilityBin>,
    pub adaptive_bins: Vec<ReliabilityBin>,
}

impl CalibrationReport {
    pub fn from_predictions<T: Real>(preds: &PredictionSet<T>, num_bins: usize) -> Result<Self> {
        let ece_out = ece(preds, num_bins)?;
        let aece_out = aece(preds, num_bins)?;
        Ok(Self {
            num_samples: preds.len(),
            accuracy: accuracy(preds)?,
            avg_confidence: avg_confidence(preds)?,
            ece: ece_out.value,
            aece: aece_out.value,
            mce: max_gap(&ece_out.bins),
            nll: nll_metric(preds)?,
            num_bins,
            bins: ece_out.bins,
            adaptive_bins: aece_out.bins,
        })
    }

    /// `avg_confidence − accuracy`; positive means overconfident.
    pub fn confidence_gap(&self) -> f64 {
        self.avg_confidence - self.accuracy
    }

    /// Reliability table as CSV: `bin_lo,bin_hi,count,avg_conf,avg_acc,gap`.
    pub fn reliability_csv(&self) -> String {
        reliability_csv(&self.bins)
    }
}

/// Reliability table as CSV; `gap` is `|avg_acc − avg_conf|`.
pub fn reliability_csv(bins: &[ReliabilityBin]) -> String {
    let mut out = String::from("bin_lo,bin_hi,count,avg_conf,avg_acc,gap\n");
    for b in bins {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            b.lo,
            b.hi,
            b.count,
            b.avg_confidence,
            b.avg_accuracy,
            b.gap()
        );
    }
    out
}

/// Out-of-distribution separation by max-softmax confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScores {
    pub in_scores: Vec<f64>,
    pub out_scores: Vec<f64>,
    pub auroc: f64,
    pub fpr95: f64,
}

impl OodScores {
    pub fn new(in_scores: Vec<f64>, out_scores: Vec<f64>) -> Result<Self> {
        let auroc = auroc(&in_scores, &out_scores)?;
        let fpr95 = fpr95(&in_scores, &out_scores)?;
        Ok(Self {
            in_scores,
            out_scores,
            auroc,
            fpr95,
        })
    }

    pub fn from_predictions<T: Real>(
        in_dist: &PredictionSet<T>,
        out_dist: &PredictionSet<T>,
    ) -> Result<Self> {
        Self::new(
            in_dist.confidences().into_iter().map(Real::as_f64).collect(),
            out_dist.confidences().into_iter().map(Real::as_f64).collect(),
        )
    }
}

fn check_scores(in_scores: &[f64], out_scores: &[f64]) -> Result<()> {
    if in_scores.is_empty() || out_scores.is_empty() {
        return Err(Error::domain("AUROC/FPR95 need scores on both sides"));
    }
    if in_scores.iter().chain(out_scores).any(|x| x.is_nan()) {
        return Err(Error::domain("NaN score"));
    }
    Ok(())
}

/// Mann–Whitney AUROC: fraction of `(in, out)` pairs with `in > out`,
/// ties counted one half.
pub fn auroc(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    check_scores(in_scores, out_scores)?;
    let mut outs = out_scores.to_vec();
    outs.sort_by(f64::total_cmp);
    // Twice the Mann–Whitney U, kept integral so the division is the only
    // rounding step.
    let mut doubled: u128 = 0;
    for &s in in_scores {
        let below = outs.partition_point(|&o| o.total_cmp(&s) == Ordering::Less);
        let not_above = outs.partition_point(|&o| o.total_cmp(&s) != Ordering::Greater);
        doubled += 2 * below as u128 + (not_above - below) as u128;
    }
    let pairs = 2 * in_scores.len() as u128 * out_scores.len() as u128;
    Ok(doubled as f64 / pairs as f64)
}

/// False-positive rate at the largest threshold whose true-positive rate
/// (fraction of `in_scores ≥ θ`) is at least 95%.
pub fn fpr95(in_scores: &[f64], out_scores: &[f64]) -> Result<f64> {
    check_scores(in_scores, out_scores)?;
    let mut ins = in_scores.to_vec();
    ins.sort_by(|a, b| b.total_cmp(a));
    let n = ins.len();
    // Smallest k with k / n ≥ 0.95.
    let k = (95 * n).div_ceil(100);
    let threshold = ins[k - 1];
    let false_pos = out_scores.iter().filter(|&&o| o >= threshold).count();
    Ok(false_pos as f64 / out_scores.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Two-class prediction set with the given confidences; class 0 is
    /// predicted and correctness picks the label.
    fn binary_set(conf: &[f64], correct: &[bool]) -> PredictionSet<f64> {
        let rows: Vec<Vec<f64>> = conf.iter().map(|&c| vec![c, 1.0 - c]).collect();
        let labels = correct.iter().map(|&ok| usize::from(!ok)).collect();
        PredictionSet::new(Matrix::from_rows(&rows).unwrap(), labels).unwrap()
    }

    #[test]
    fn ece_perfect_confidence_one() {
        let p = binary_set(&[1.0, 1.0, 1.0], &[true, true, true]);
        assert_eq!(ece(&p, 15).unwrap().value, 0.0);
        assert_eq!(mce(&p, 15).unwrap(), 0.0);
    }

    #[test]
    fn ece_and_mce_two_sample_example() {
        let p = binary_set(&[0.9, 0.9], &[true, false]);
        let out = ece(&p, 10).unwrap();
        assert!((out.value - 0.4).abs() < 1e-12);
        assert!((mce(&p, 10).unwrap() - 0.4).abs() < 1e-12);
        let occupied: Vec<_> = out.bins.iter().filter(|b| b.count > 0).collect();
        assert_eq!(occupied.len(), 1);
        assert!((occupied[0].avg_accuracy - 0.5).abs() < 1e-15);
    }

    #[test]
    fn aece_hand_example() {
        let p = binary_set(&[0.6, 0.7, 0.8, 0.9], &[true, false, true, true]);
        let out = aece(&p, 2).unwrap();
        assert!((out.value - 0.15).abs() < 1e-12);
        assert_eq!(out.bins[0].count, 2);
        assert_eq!(out.bins[1].count, 2);
    }

    #[test]
    fn aece_constant_confidence_matching_accuracy() {
        let p = binary_set(&[0.75; 8], &[true, true, true, false, true, true, true, false]);
        assert!(aece(&p, 1).unwrap().value.abs() < 1e-15);
    }

    #[test]
    fn aece_equal_count_rule() {
        for n in 1..40usize {
            for m in 1..=n {
                let conf: Vec<f64> = (0..n).map(|i| 0.5 + 0.5 * (i as f64 / n as f64)).collect();
                let p = binary_set(&conf, &vec![true; n]);
                let bins = aece(&p, m).unwrap().bins;
                let sizes: Vec<usize> = bins.iter().map(|b| b.count).collect();
                let max = *sizes.iter().max().unwrap();
                let min = *sizes.iter().min().unwrap();
                assert!(max - min <= 1);
                assert_eq!(sizes.iter().sum::<usize>(), n);
                // Larger groups come first.
                assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
            }
        }
    }

    #[test]
    fn metric_errors() {
        let empty = PredictionSet::<f64>::new(Matrix::zeros(0, 2), vec![]).unwrap();
        assert!(ece(&empty, 10).is_err());
        assert!(mce(&empty, 10).is_err());
        let p = binary_set(&[0.6, 0.7], &[true, true]);
        assert!(aece(&p, 3).is_err());
        assert!(ece(&p, 0).is_err());
        assert!(PredictionSet::new(Matrix::<f64>::zeros(2, 2), vec![0]).is_err());
        assert!(PredictionSet::new(Matrix::<f64>::zeros(1, 2), vec![2]).is_err());
    }

    #[test]
    fn bin_edges() {
        assert_eq!(bin_index(0.0, 10), 0);
        assert_eq!(bin_index(1.0, 10), 9);
        assert_eq!(bin_index(0.3, 10), 3);
        assert_eq!(bin_index(0.2999999, 10), 2);
        assert_eq!(bin_index(0.5, 2), 1);
        for m in 1..30 {
            for b in 0..m {
                let lo = b as f64 / m as f64;
                assert_eq!(bin_index(lo, m), b);
            }
        }
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5; 4], &[0.5; 3]).unwrap(), 0.5);
        assert_eq!(auroc(&[0.9, 0.8], &[0.85, 0.7]).unwrap(), 0.75);
        assert!(auroc(&[], &[0.1]).is_err());
        assert!(auroc(&[0.1], &[]).is_err());
    }

    #[test]
    fn fpr95_examples() {
        assert_eq!(fpr95(&[0.9, 0.95, 0.99], &[0.1, 0.2]).unwrap(), 0.0);
        let same = [0.1, 0.4, 0.4, 0.7, 0.9];
        assert!(fpr95(&same, &same).unwrap() >= 0.95);
        // 20 in-scores: the 19th largest is the 95% threshold.
        let ins: Vec<f64> = (0..20).map(|i| i as f64).collect();
        // Threshold is 1.0: outs ≥ 1 are 1.0 and 5.0.
        assert_eq!(fpr95(&ins, &[0.5, 1.0, 5.0, -3.0]).unwrap(), 0.5);
        assert!(fpr95(&[], &[0.1]).is_err());
    }

    #[test]
    fn reliability_csv_shape() {
        let p = binary_set(&[0.9, 0.9], &[true, false]);
        let r = CalibrationReport::from_predictions(&p, 2).unwrap();
        let csv = r.reliability_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "bin_lo,bin_hi,count,avg_conf,avg_acc,gap");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("0.5,1,2,0.9,0.5,"));
    }
}
