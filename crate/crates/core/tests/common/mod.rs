//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use maccal_core::{Head, Matrix, PredictionSet, RngStream};

/// Brute-force equal-width binning: every bin rescans every sample.
/// Returns `(ece, mce)`.
pub fn brute_ece_mce(conf: &[f64], correct: &[bool], bins: usize) -> (f64, f64) {
    let n = conf.len() as f64;
    let (mut ece, mut mce) = (0.0, 0.0f64);
    for m in 0..bins {
        let lo = m as f64 / bins as f64;
        let hi = (m + 1) as f64 / bins as f64;
        let last = m + 1 == bins;
        let members: Vec<usize> = (0..conf.len())
            .filter(|&i| conf[i] >= lo && (conf[i] < hi || (last && conf[i] <= 1.0)))
            .collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let c: f64 = members.iter().map(|&i| conf[i]).sum::<f64>() / k;
        let a = members.iter().filter(|&&i| correct[i]).count() as f64 / k;
        ece += k / n * (a - c).abs();
        mce = mce.max((a - c).abs());
    }
    (ece, mce)
}

/// Equal-count bins over samples ranked by `(confidence, index)`.
pub fn brute_aece(conf: &[f64], correct: &[bool], bins: usize) -> f64 {
    let n = conf.len();
    let mut ranked: Vec<(f64, usize)> = conf.iter().copied().zip(0..).collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let mut total = 0.0;
    let mut start = 0;
    for m in 0..bins {
        let size = n / bins + usize::from(m < n % bins);
        let group = &ranked[start..start + size];
        let c: f64 = group.iter().map(|g| g.0).sum::<f64>() / size as f64;
        let a = group.iter().filter(|g| correct[g.1]).count() as f64 / size as f64;
        total += size as f64 / n as f64 * (a - c).abs();
        start += size;
    }
    total
}

/// Exhaustive pair enumeration.
pub fn brute_auroc(ins: &[f64], outs: &[f64]) -> f64 {
    let mut twice = 0u64;
    for &a in ins {
        for &b in outs {
            twice += if a > b {
                2
            } else if a == b {
                1
            } else {
                0
            };
        }
    }
    twice as f64 / (2 * ins.len() * outs.len()) as f64
}

/// Scans every observed score as a threshold and keeps the largest one whose
/// in-distribution recall is at least 95%.
pub fn brute_fpr95(ins: &[f64], outs: &[f64]) -> f64 {
    let mut best: Option<f64> = None;
    for &t in ins.iter().chain(outs) {
        let tp = ins.iter().filter(|&&s| s >= t).count();
        if 100 * tp >= 95 * ins.len() && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the minimum in-score always qualifies");
    outs.iter().filter(|&&s| s >= t).count() as f64 / outs.len() as f64
}

/// Random `n × k` prediction set from Gaussian logits with scale `scale`;
/// labels agree with the argmax with probability about one half.
pub fn random_predictions(n: usize, k: usize, scale: f64, seed: u64) -> PredictionSet<f64> {
    let mut rng = RngStream::new(seed, 0xACE);
    let logits = Matrix::from_fn(n, k, |_, _| scale * rng.normal());
    let arg = logits.argmax_rows();
    let labels = arg
        .into_iter()
        .map(|a| if rng.uniform() < 0.5 { a } else { rng.below(k) })
        .collect();
    PredictionSet::from_logits(&logits, labels).unwrap()
}

pub fn conf_and_correct(p: &PredictionSet<f64>) -> (Vec<f64>, Vec<bool>) {
    (p.confidences(), p.correctness())
}

/// Mean cross-entropy of the masked head computed with plain loops.
pub fn masked_ce(head: &Head<f64>, masks: &[Matrix<f64>], z: &Matrix<f64>, labels: &[usize]) -> f64 {
    let dense = |x: &[f64], w: &Matrix<f64>, m: &Matrix<f64>| -> Vec<f64> {
        (0..w.cols())
            .map(|j| (0..w.rows()).map(|i| x[i] * m.get(i, j) * w.get(i, j)).sum())
            .collect()
    };
    let mut total = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let logits = match head {
            Head::Linear { weights } => dense(z.row(r), weights, &masks[0]),
            Head::Bottleneck { w1, w2, activation } => {
                let h: Vec<f64> = dense(z.row(r), w1, &masks[0])
                    .into_iter()
                    .map(|v| match activation {
                        maccal_core::Activation::Relu => v.max(0.0),
                        maccal_core::Activation::Identity => v,
                    })
                    .collect();
                dense(&h, w2, &masks[1])
            }
        };
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln() + max;
        total += lse - logits[y];
    }
    total / labels.len() as f64
}

/// Central differences of [`masked_ce`] with respect to every head weight.
pub fn fd_head_grads(
    head: &Head<f64>,
    masks: &[Matrix<f64>],
    z: &Matrix<f64>,
    labels: &[usize],
    step: f64,
) -> Vec<Matrix<f64>> {
    let shapes = head.weight_shapes();
    let mut out = Vec::new();
    for (w, &(rows, cols)) in shapes.iter().enumerate() {
        let mut g = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                let mut plus = head.clone();
                let mut minus = head.clone();
                let p = plus.weights_mut().swap_remove(w);
                p.set(i, j, p.get(i, j) + step);
                let m = minus.weights_mut().swap_remove(w);
                m.set(i, j, m.get(i, j) - step);
                let d = masked_ce(&plus, masks, z, labels) - masked_ce(&minus, masks, z, labels);
                g.set(i, j, d / (2.0 * step));
            }
        }
        out.push(g);
    }
    out
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)` over all matrices, 0 when both vanish.
pub fn relative_error(a: &[Matrix<f64>], b: &[Matrix<f64>]) -> f64 {
    let (mut diff, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        for (&p, &q) in x.data().iter().zip(y.data()) {
            diff += (p - q) * (p - q);
            na += p * p;
            nb += q * q;
        }
    }
    let scale = na.max(nb).sqrt();
    if scale == 0.0 {
        0.0
    } else {
        diff.sqrt() / scale
    }
}
