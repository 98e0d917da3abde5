//! Training objectives: cross-entropy, focal loss, label smoothing, and
//! their mixup-weighted forms.
//!
//! Every loss returns its batch mean together with the gradient with
//! respect to the logits (already divided by the batch size), so the model
//! code only ever sees `∂L/∂logits`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::Matrix;
use crate::scalar::Real;

/// Probabilities below this are clamped inside `ln`.
pub const LOG_FLOOR: f64 = 1e-12;

/// Default focal exponent.
pub const DEFAULT_FOCAL_GAMMA: f64 = 3.0;

/// Default label-smoothing mass.
pub const DEFAULT_SMOOTHING: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Focal { gamma: f64 },
    /// Sample-dependent focal loss: exponent 5 when `p_y < 0.2`, else 3.
    FocalSampleDependent,
    LabelSmoothing { epsilon: f64 },
}

impl Default for LossKind {
    fn default() -> Self {
        LossKind::CrossEntropy
    }
}

impl LossKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            LossKind::Focal { gamma } if !(gamma >= 0.0) => {
                Err(Error::domain(format!("focal gamma {gamma} must be ≥ 0")))
            }
            LossKind::LabelSmoothing { epsilon } if !(0.0..1.0).contains(&epsilon) => Err(
                Error::domain(format!("label smoothing ε {epsilon} must lie in [0, 1)")),
            ),
            _ => Ok(()),
        }
    }
}

/// Targets for a batch: hard labels, or mixup pairs weighted by λ.
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a, T> {
    Hard(&'a [usize]),
    Mixup {
        pairs: &'a [(usize, usize)],
        lambdas: &'a [T],
    },
}

impl<T: Real> Targets<'_, T> {
    pub fn len(&self) -> usize {
        match self {
            Targets::Hard(y) => y.len(),
            Targets::Mixup { pairs, .. } => pairs.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(class, weight)` components of row `r`; weights sum to one.
    fn components(&self, r: usize) -> [(usize, T); 2] {
        match self {
            Targets::Hard(y) => [(y[r], T::one()), (y[r], T::zero())],
            Targets::Mixup { pairs, lambdas } => {
                let (a, b) = pairs[r];
                [(a, lambdas[r]), (b, T::one() - lambdas[r])]
            }
        }
    }

    /// Dense soft-target matrix (one-hot rows, or λ-mixtures of one-hots).
    pub fn to_dense(&self, num_classes: usize) -> Matrix<T> {
        let mut out = Matrix::zeros(self.len(), num_classes);
        for r in 0..self.len() {
            for (c, w) in self.components(r) {
                let cur = out.get(r, c);
                out.set(r, c, cur + w);
            }
        }
        out
    }

    fn check(&self, probs: &Matrix<T>) -> Result<()> {
        if self.len() != probs.rows() {
            return Err(Error::shape(
                "loss",
                format!("{} targets for {} rows", self.len(), probs.rows()),
            ));
        }
        for r in 0..self.len() {
            for (c, _) in self.components(r) {
                if c >= probs.cols() {
                    return Err(Error::domain(format!(
                        "label {c} outside [0, {})",
                        probs.cols()
                    )));
                }
            }
        }
        if let Targets::Mixup { lambdas, .. } = self {
            if lambdas.len() != self.len() {
                return Err(Error::shape("loss", "one λ per mixup pair required"));
            }
        }
        Ok(())
    }
}

/// Batch-mean loss plus the number of log arguments clamped to the floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue<T> {
    pub value: T,
    pub floored: usize,
}

/// Loss value and `∂L/∂logits` for a batch.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub loss: LossValue<T>,
    pub probs: Matrix<T>,
    pub grad_logits: Matrix<T>,
}

fn floored_ln<T: Real>(p: T, floored: &mut usize) -> T {
    let floor = T::lit(LOG_FLOOR);
    if p < floor {
        *floored += 1;
        floor.ln()
    } else {
        p.ln()
    }
}

/// Mean negative log-likelihood; mixup rows contribute
/// `λ·CE(y_a) + (1−λ)·CE(y_b)`.
pub fn cross_entropy<T: Real>(probs: &Matrix<T>, targets: &Targets<'_, T>) -> Result<LossValue<T>> {
    targets.check(probs)?;
    let mut floored = 0;
    let mut total = T::zero();
    for r in 0..probs.rows() {
        for (c, w) in targets.components(r) {
            if w != T::zero() {
                total = total - w * floored_ln(probs.get(r, c), &mut floored);
            }
        }
    }
    Ok(LossValue {
        value: total / T::from_count(probs.rows().max(1)),
        floored,
    })
}

/// Cross-entropy against arbitrary soft targets (rows summing to one).
pub fn soft_cross_entropy<T: Real>(probs: &Matrix<T>, soft: &Matrix<T>) -> Result<LossValue<T>> {
    if probs.shape() != soft.shape() {
        return Err(Error::shape(
            "soft_cross_entropy",
            format!("{:?} vs {:?}", probs.shape(), soft.shape()),
        ));
    }
    let mut floored = 0;
    let mut total = T::zero();
    for (&p, &t) in probs.data().iter().zip(soft.data()) {
        if t != T::zero() {
            total = total - t * floored_ln(p, &mut floored);
        }
    }
    Ok(LossValue {
        value: total / T::from_count(probs.rows().max(1)),
        floored,
    })
}

/// Mean of `−(1 − p_y)^γ · ln p_y`.
pub fn focal_loss<T: Real>(
    probs: &Matrix<T>,
    targets: &Targets<'_, T>,
    gamma: f64,
) -> Result<LossValue<T>> {
    if !(gamma >= 0.0) {
        return Err(Error::domain(format!("focal gamma {gamma} must be ≥ 0")));
    }
    targets.check(probs)?;
    let g = T::lit(gamma);
    let mut floored = 0;
    let mut total = T::zero();
    for r in 0..probs.rows() {
        for (c, w) in targets.components(r) {
            if w != T::zero() {
                let p = probs.get(r, c);
                total = total - w * ((T::one() - p).powf(g) * floored_ln(p, &mut floored));
            }
        }
    }
    Ok(LossValue {
        value: total / T::from_count(probs.rows().max(1)),
        floored,
    })
}

/// `1 − ε` on the true class and `ε / (K − 1)` on every other class.
pub fn label_smooth_targets<T: Real>(
    labels: &[usize],
    num_classes: usize,
    epsilon: f64,
) -> Result<Matrix<T>> {
    if !(0.0..1.0).contains(&epsilon) {
        return Err(Error::domain(format!("label smoothing ε {epsilon} must lie in [0, 1)")));
    }
    if num_classes < 2 {
        return Err(Error::domain("label smoothing needs at least 2 classes"));
    }
    let off = T::lit(epsilon) / T::from_count(num_classes - 1);
    let on = T::one() - off * T::from_count(num_classes - 1);
    let mut out = Matrix::filled(labels.len(), num_classes, off);
    for (r, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::domain(format!("label {y} outside [0, {num_classes})")));
        }
        out.set(r, y, on);
    }
    Ok(out)
}

fn sample_dependent_gamma<T: Real>(p: T) -> T {
    if p < T::lit(0.2) {
        T::lit(5.0)
    } else {
        T::lit(3.0)
    }
}

impl LossKind {
    /// Softmax of `logits`, batch-mean loss and its logit gradient.
    pub fn evaluate<T: Real>(
        &self,
        logits: &Matrix<T>,
        targets: &Targets<'_, T>,
    ) -> Result<LossOutput<T>> {
        self.validate()?;
        let probs = logits.softmax_rows();
        targets.check(&probs)?;
        let (n, k) = probs.shape();
        let inv_n = T::one() / T::from_count(n.max(1));
        let mut grad = Matrix::zeros(n, k);
        let mut floored = 0;
        let mut total = T::zero();

        for r in 0..n {
            for (c, w) in targets.components(r) {
                if w == T::zero() {
                    continue;
                }
                match *self {
                    LossKind::CrossEntropy => {
                        total = total - w * floored_ln(probs.get(r, c), &mut floored);
                        add_ce_grad(&mut grad, &probs, r, c, w);
                    }
                    LossKind::LabelSmoothing { epsilon } => {
                        let off = T::lit(epsilon) / T::from_count(k - 1);
                        let on = T::one() - off * T::from_count(k - 1);
                        for j in 0..k {
                            let t = if j == c { on } else { off };
                            let p = probs.get(r, j);
                            if t != T::zero() {
                                total = total - w * t * floored_ln(p, &mut floored);
                            }
                            let cur = grad.get(r, j);
                            grad.set(r, j, cur + w * (p - t));
                        }
                    }
                    LossKind::Focal { gamma } => {
                        let g = T::lit(gamma);
                        total = total + w * add_focal(&mut grad, &probs, r, c, w, g, &mut floored);
                    }
                    LossKind::FocalSampleDependent => {
                        let g = sample_dependent_gamma(probs.get(r, c));
                        total = total + w * add_focal(&mut grad, &probs, r, c, w, g, &mut floored);
                    }
                }
            }
        }
        for x in grad.data_mut() {
            *x = *x * inv_n;
        }
        Ok(LossOutput {
            loss: LossValue {
                value: total * inv_n,
                floored,
            },
            probs,
            grad_logits: grad,
        })
    }
}

fn add_ce_grad<T: Real>(grad: &mut Matrix<T>, probs: &Matrix<T>, r: usize, c: usize, w: T) {
    for j in 0..probs.cols() {
        let t = if j == c { T::one() } else { T::zero() };
        let cur = grad.get(r, j);
        grad.set(r, j, cur + w * (probs.get(r, j) - t));
    }
}

/// Adds `w · ∂FL/∂logits` for row `r`, class `c`; returns the unweighted loss.
///
/// With `p = p_c`, `∂FL/∂l_j = [γ(1−p)^{γ−1} p ln p − (1−p)^γ] (δ_jc − p_j)`.
fn add_focal<T: Real>(
    grad: &mut Matrix<T>,
    probs: &Matrix<T>,
    r: usize,
    c: usize,
    w: T,
    gamma: T,
    floored: &mut usize,
) -> T {
    let p = probs.get(r, c);
    let ln_p = floored_ln(p, floored);
    let rest = T::one() - p;
    let loss = -(rest.powf(gamma) * ln_p);
    let first = if gamma == T::zero() || rest <= T::zero() {
        T::zero()
    } else {
        gamma * rest.powf(gamma - T::one()) * p * ln_p
    };
    let coef = first - rest.powf(gamma);
    for j in 0..probs.cols() {
        let delta = if j == c { T::one() } else { T::zero() };
        let cur = grad.get(r, j);
        grad.set(r, j, cur + w * coef * (delta - probs.get(r, j)));
    }
    loss
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::RngStream;

    fn probs(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn cross_entropy_examples() {
        let perfect = probs(&[vec![1.0, 0.0, 0.0]]);
        assert_eq!(cross_entropy(&perfect, &Targets::Hard(&[0])).unwrap().value, 0.0);

        let k = 4;
        let uniform = Matrix::filled(3, k, 0.25);
        let v = cross_entropy(&uniform, &Targets::Hard(&[0, 1, 3])).unwrap().value;
        assert!((v - (k as f64).ln()).abs() < 1e-15);

        let p = probs(&[vec![0.7, 0.3]]);
        let v = cross_entropy(&p, &Targets::Hard(&[0])).unwrap().value;
        assert!((v - 0.356675).abs() < 1e-6);
        assert_eq!(v, -(0.7f64.ln()));
    }

    #[test]
    fn cross_entropy_floors_zero_probability() {
        let p = probs(&[vec![1.0, 0.0]]);
        let v = cross_entropy(&p, &Targets::Hard(&[1])).unwrap();
        assert_eq!(v.floored, 1);
        assert!((v.value + LOG_FLOOR.ln()).abs() < 1e-12);
        assert!(v.value.is_finite());
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let p = probs(&[vec![0.5, 0.5]]);
        assert!(cross_entropy(&p, &Targets::Hard(&[2])).is_err());
        assert!(cross_entropy(&p, &Targets::Hard(&[0, 1])).is_err());
    }

    #[test]
    fn focal_examples() {
        let p = probs(&[vec![0.6, 0.3, 0.1], vec![0.2, 0.5, 0.3]]);
        let t = Targets::Hard(&[0, 2]);
        assert_eq!(
            focal_loss(&p, &t, 0.0).unwrap().value,
            cross_entropy(&p, &t).unwrap().value
        );

        let certain = probs(&[vec![0.0, 1.0]]);
        for g in [0.5, 1.0, 3.0] {
            assert_eq!(focal_loss(&certain, &Targets::Hard(&[1]), g).unwrap().value, 0.0);
        }

        let half = probs(&[vec![0.5, 0.5]]);
        let v = focal_loss(&half, &Targets::Hard(&[0]), 2.0).unwrap().value;
        assert!((v - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((v - 0.173287).abs() < 1e-6);
        assert!(focal_loss(&half, &Targets::Hard(&[0]), -1.0).is_err());
    }

    #[test]
    fn label_smoothing_examples() {
        let t: Matrix<f64> = label_smooth_targets(&[0, 2, 1], 3, 0.0).unwrap();
        assert_eq!(t, Targets::<f64>::Hard(&[0, 2, 1]).to_dense(3));

        let t: Matrix<f64> = label_smooth_targets(&[0], 2, 0.1).unwrap();
        assert!((t.get(0, 0) - 0.9).abs() < 1e-15);
        assert!((t.get(0, 1) - 0.1).abs() < 1e-15);

        let t: Matrix<f64> = label_smooth_targets(&[0, 1, 2, 3, 4, 5, 6], 7, 0.13).unwrap();
        for r in 0..t.rows() {
            let s: f64 = t.row(r).iter().sum();
            assert!((s - 1.0).abs() <= 4.0 * f64::EPSILON);
        }
        assert!(label_smooth_targets::<f64>(&[0], 2, 1.0).is_err());
        assert!(label_smooth_targets::<f64>(&[0], 2, -0.1).is_err());
    }

    #[test]
    fn mixup_targets_are_linear_in_lambda() {
        let p = probs(&[vec![0.6, 0.3, 0.1]]);
        let pairs = [(0, 2)];
        let l1 = cross_entropy(&p, &Targets::Hard(&[0])).unwrap().value;
        let l0 = cross_entropy(&p, &Targets::Hard(&[2])).unwrap().value;
        for lam in [0.0, 0.25, 0.5, 0.9, 1.0] {
            let v = cross_entropy(&p, &Targets::Mixup { pairs: &pairs, lambdas: &[lam] })
                .unwrap()
                .value;
            assert!((v - (lam * l1 + (1.0 - lam) * l0)).abs() < 1e-14);
        }
    }

    fn random_logits(rng: &mut RngStream, n: usize, k: usize) -> Matrix<f64> {
        Matrix::from_fn(n, k, |_, _| 2.0 * rng.normal())
    }

    /// Central differences of the batch loss with respect to each logit.
    fn fd_grad(kind: LossKind, logits: &Matrix<f64>, targets: &Targets<'_, f64>) -> Matrix<f64> {
        let h = 1e-6;
        let mut out = Matrix::zeros(logits.rows(), logits.cols());
        for i in 0..logits.data().len() {
            let mut plus = logits.clone();
            plus.data_mut()[i] += h;
            let mut minus = logits.clone();
            minus.data_mut()[i] -= h;
            let lp = kind.evaluate(&plus, targets).unwrap().loss.value;
            let lm = kind.evaluate(&minus, targets).unwrap().loss.value;
            out.data_mut()[i] = (lp - lm) / (2.0 * h);
        }
        out
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut rng = RngStream::new(17, 0);
        let kinds = [
            LossKind::CrossEntropy,
            LossKind::Focal { gamma: 0.0 },
            LossKind::Focal { gamma: 2.0 },
            LossKind::Focal { gamma: 0.5 },
            LossKind::FocalSampleDependent,
            LossKind::LabelSmoothing { epsilon: 0.1 },
        ];
        let labels = [0usize, 3, 1, 2, 2];
        let pairs = [(0usize, 1usize), (3, 3), (1, 2), (2, 0), (4, 1)];
        let lambdas = [0.3, 0.9, 0.5, 1.0, 0.0];
        for kind in kinds {
            let logits = random_logits(&mut rng, 5, 5);
            for targets in [
                Targets::Hard(&labels),
                Targets::Mixup { pairs: &pairs, lambdas: &lambdas },
            ] {
                let out = kind.evaluate(&logits, &targets).unwrap();
                let fd = fd_grad(kind, &logits, &targets);
                for (a, b) in out.grad_logits.data().iter().zip(fd.data()) {
                    assert!((a - b).abs() < 1e-7, "{kind:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn evaluate_matches_standalone_losses() {
        let mut rng = RngStream::new(5, 0);
        let logits = random_logits(&mut rng, 6, 3);
        let labels = [0, 1, 2, 2, 1, 0];
        let t = Targets::Hard(&labels);
        let probs = logits.softmax_rows();
        let ce = LossKind::CrossEntropy.evaluate(&logits, &t).unwrap().loss.value;
        assert!((ce - cross_entropy(&probs, &t).unwrap().value).abs() < 1e-14);
        let fl = LossKind::Focal { gamma: 3.0 }.evaluate(&logits, &t).unwrap().loss.value;
        assert!((fl - focal_loss(&probs, &t, 3.0).unwrap().value).abs() < 1e-14);
        let soft: Matrix<f64> = label_smooth_targets(&labels, 3, 0.2).unwrap();
        let ls = LossKind::LabelSmoothing { epsilon: 0.2 }
            .evaluate(&logits, &t)
            .unwrap()
            .loss
            .value;
        assert!((ls - soft_cross_entropy(&probs, &soft).unwrap().value).abs() < 1e-14);
    }

    #[test]
    fn label_smoothing_zero_reduces_to_cross_entropy() {
        let mut rng = RngStream::new(8, 0);
        let logits = random_logits(&mut rng, 4, 3);
        let t = Targets::Hard(&[0, 1, 2, 0]);
        let a = LossKind::CrossEntropy.evaluate(&logits, &t).unwrap();
        let b = LossKind::LabelSmoothing { epsilon: 0.0 }.evaluate(&logits, &t).unwrap();
        assert_eq!(a.loss.value, b.loss.value);
        assert_eq!(a.grad_logits, b.grad_logits);
    }

    #[test]
    fn loss_kind_validation() {
        assert!(LossKind::Focal { gamma: -0.5 }.validate().is_err());
        assert!(LossKind::LabelSmoothing { epsilon: 1.0 }.validate().is_err());
        assert!(LossKind::LabelSmoothing { epsilon: 0.0 }.validate().is_ok());
    }
}
