//! Temperature scaling fitted on validation NLL.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Matrix;
use crate::losses::LOG_FLOOR;
use crate::scalar::Real;

pub const T_MIN: f64 = 0.05;
pub const T_MAX: f64 = 10.0;
const GRID_POINTS: usize = 60;
const TOLERANCE: f64 = 1e-4;

/// A fitted softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub value: f64,
    /// Set when the optimum sits on a search bound.
    pub at_boundary: bool,
}

impl Temperature {
    pub fn new(value: f64) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return Err(Error::domain(format!("temperature {value} must be > 0")));
        }
        Ok(Self {
            value,
            at_boundary: false,
        })
    }

    pub fn identity() -> Self {
        Self {
            value: 1.0,
            at_boundary: false,
        }
    }
}

/// `softmax(logits / T)`.
pub fn apply_temperature<T: Real>(logits: &Matrix<T>, temperature: Temperature) -> Matrix<T> {
    if temperature.value == 1.0 {
        return logits.softmax_rows();
    }
    logits.scale(T::one() / T::lit(temperature.value)).softmax_rows()
}

/// Mean NLL of `softmax(logits / t)`, accumulated in `f64`.
pub fn temperature_nll<T: Real>(logits: &Matrix<T>, labels: &[usize], t: f64) -> f64 {
    let mut total = 0.0;
    let mut row = Vec::with_capacity(logits.cols());
    for (r, &y) in labels.iter().enumerate() {
        row.clear();
        row.extend(logits.row(r).iter().map(|x| x.as_f64() / t));
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_norm = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        let log_p = (row[y] - log_norm).max(LOG_FLOOR.ln());
        total -= log_p;
    }
    total / labels.len() as f64
}

/// Minimises validation NLL over `T ∈ [0.05, 10]`: a geometric grid (which
/// includes `T = 1`) followed by golden-section refinement around the best
/// grid point.
pub fn fit_temperature<T: Real>(val_logits: &Matrix<T>, val_labels: &[usize]) -> Result<Temperature> {
    if val_labels.is_empty() {
        return Err(Error::domain("temperature fit needs a non-empty validation set"));
    }
    if val_logits.rows() != val_labels.len() {
        return Err(Error::shape(
            "fit_temperature",
            format!("{} logit rows for {} labels", val_logits.rows(), val_labels.len()),
        ));
    }
    if let Some(&y) = val_labels.iter().find(|&&y| y >= val_logits.cols()) {
        return Err(Error::domain(format!("label {y} outside [0, {})", val_logits.cols())));
    }
    let nll = |t: f64| temperature_nll(val_logits, val_labels, t);

    let ratio = (T_MAX / T_MIN).powf(1.0 / (GRID_POINTS - 1) as f64);
    let mut grid: Vec<f64> = (0..GRID_POINTS).map(|i| T_MIN * ratio.powi(i as i32)).collect();
    grid[GRID_POINTS - 1] = T_MAX;
    grid.push(1.0);
    grid.sort_by(f64::total_cmp);
    grid.dedup();

    let scores: Vec<f64> = grid.iter().map(|&t| nll(t)).collect();
    let best = scores
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
        .expect("grid is non-empty");

    let mut lo = grid[best.saturating_sub(1)];
    let mut hi = grid[(best + 1).min(grid.len() - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let (mut fa, mut fb) = (nll(a), nll(b));
    while hi - lo > TOLERANCE {
        if fa <= fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = nll(a);
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = nll(b);
        }
    }
    let refined = 0.5 * (lo + hi);
    let (value, value_nll) = if nll(refined) <= scores[best] {
        (refined, nll(refined))
    } else {
        (grid[best], scores[best])
    };
    debug_assert!(value_nll <= nll(1.0));
    let at_boundary = (value - T_MIN).abs() < 2.0 * TOLERANCE || (T_MAX - value).abs() < 2.0 * TOLERANCE;
    Ok(Temperature { value, at_boundary })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::RngStream;

    #[test]
    fn identity_temperature_is_plain_softmax() {
        let mut rng = RngStream::new(1, 0);
        let logits = Matrix::<f64>::from_fn(5, 4, |_, _| rng.normal());
        assert_eq!(apply_temperature(&logits, Temperature::identity()), logits.softmax_rows());
    }

    #[test]
    fn large_temperature_approaches_uniform() {
        let mut rng = RngStream::new(2, 0);
        let logits = Matrix::<f64>::from_fn(5, 4, |_, _| 3.0 * rng.normal());
        let p = apply_temperature(&logits, Temperature::new(1e6).unwrap());
        for &x in p.data() {
            assert!((x - 0.25).abs() < 1e-4);
        }
    }

    #[test]
    fn temperature_preserves_argmax_and_stochasticity() {
        let mut rng = RngStream::new(3, 0);
        let logits = Matrix::<f64>::from_fn(50, 6, |_, _| 4.0 * rng.normal());
        let base = logits.argmax_rows();
        for t in [0.1, 1.0, 10.0] {
            let p = apply_temperature(&logits, Temperature::new(t).unwrap());
            assert_eq!(p.argmax_rows(), base);
            for r in 0..p.rows() {
                assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(Temperature::new(0.0).is_err());
        assert!(Temperature::new(-1.0).is_err());
        assert!(fit_temperature(&Matrix::<f64>::zeros(0, 3), &[]).is_err());
        assert!(fit_temperature(&Matrix::<f64>::zeros(2, 3), &[0]).is_err());
    }

    /// Samples labels from `softmax(logits)` so that T = 1 is NLL-optimal in
    /// expectation.
    fn calibrated_set(n: usize, seed: u64) -> (Matrix<f64>, Vec<usize>) {
        let mut rng = RngStream::new(seed, 0);
        let logits = Matrix::<f64>::from_fn(n, 4, |_, _| 1.5 * rng.normal());
        let probs = logits.softmax_rows();
        let labels = (0..n)
            .map(|r| {
                let u = rng.uniform();
                let mut acc = 0.0;
                for k in 0..4 {
                    acc += probs.get(r, k);
                    if u < acc {
                        return k;
                    }
                }
                3
            })
            .collect();
        (logits, labels)
    }

    #[test]
    fn calibrated_logits_fit_near_one() {
        let (logits, labels) = calibrated_set(20_000, 4);
        let t = fit_temperature(&logits, &labels).unwrap();
        assert!((t.value - 1.0).abs() < 0.05, "T = {}", t.value);
        assert!(!t.at_boundary);
    }

    #[test]
    fn doubled_logits_double_the_temperature() {
        let (logits, labels) = calibrated_set(5_000, 5);
        let t1 = fit_temperature(&logits, &labels).unwrap().value;
        let t2 = fit_temperature(&logits.scale(2.0), &labels).unwrap().value;
        assert!((t2 / t1 - 2.0).abs() < 1e-3, "{t1} {t2}");
    }

    #[test]
    fn fit_never_worse_than_identity() {
        for seed in 0..5 {
            let mut rng = RngStream::new(seed, 1);
            let logits = Matrix::<f64>::from_fn(200, 5, |_, _| 5.0 * rng.normal());
            let labels: Vec<usize> = (0..200).map(|_| rng.below(5)).collect();
            let t = fit_temperature(&logits, &labels).unwrap();
            assert!(temperature_nll(&logits, &labels, t.value) <= temperature_nll(&logits, &labels, 1.0));
            assert_eq!(t, fit_temperature(&logits, &labels).unwrap());
        }
    }
}
