//! Synthetic Gaussian blobs, feature corruption, mixup, splits and CSV I/O.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{streams, Matrix, RngStream};
use crate::scalar::Real;

/// Distance of every blob center from the origin.
pub const CENTER_RADIUS: f64 = 4.0;

/// Noise scale at severity 1, as a fraction of the feature standard deviation.
pub const SEVERITY_BASE_FRACTION: f64 = 0.25;

/// Highest corruption severity.
pub const MAX_SEVERITY: u8 = 5;

/// Labeled feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    features: Matrix<T>,
    labels: Vec<usize>,
    num_classes: usize,
    class_counts: Vec<usize>,
}

impl<T: Real> Dataset<T> {
    pub fn new(features: Matrix<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::shape(
                "Dataset::new",
                format!("{} feature rows for {} labels", features.rows(), labels.len()),
            ));
        }
        let mut class_counts = vec![0; num_classes];
        for &y in &labels {
            if y >= num_classes {
                return Err(Error::domain(format!(
                    "label {y} outside [0, {num_classes})"
                )));
            }
            class_counts[y] += 1;
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            class_counts,
        })
    }

    pub fn features(&self) -> &Matrix<T> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn class_counts(&self) -> &[usize] {
        &self.class_counts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let labels: Vec<usize> = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(self.features.select_rows(indices), labels, self.num_classes)
            .expect("subset of a valid dataset is valid")
    }

    /// Population standard deviation over every feature value.
    pub fn feature_std(&self) -> f64 {
        let data = self.features.data();
        let n = data.len().max(1) as f64;
        let mean = data.iter().map(|x| x.as_f64()).sum::<f64>() / n;
        let var = data.iter().map(|x| (x.as_f64() - mean).powi(2)).sum::<f64>() / n;
        var.sqrt()
    }
}

/// Generative model behind [`gen_blobs`]: `K` isotropic Gaussians of
/// standard deviation `spread` around centers at distance
/// [`CENTER_RADIUS`] from the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub spread: f64,
    pub centers: Vec<Vec<f64>>,
}

impl BlobSpec {
    /// Places centers deterministically from `seed`. When `K ≤ d` the
    /// directions are orthonormalised so all pairs are equidistant.
    pub fn new(num_classes: usize, dim: usize, spread: f64, seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::domain(format!("need at least 2 classes, got {num_classes}")));
        }
        if dim < 2 {
            return Err(Error::domain(format!("need dimension ≥ 2, got {dim}")));
        }
        if !(spread > 0.0) || !spread.is_finite() {
            return Err(Error::domain(format!("spread must be > 0, got {spread}")));
        }
        let mut rng = RngStream::new(seed, streams::DATA_CENTERS);
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(num_classes);
        while dirs.len() < num_classes {
            let mut v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
            if num_classes <= dim {
                for u in &dirs {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (x, &b) in v.iter_mut().zip(u) {
                        *x -= dot * b;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                continue;
            }
            dirs.push(v.into_iter().map(|x| x / norm).collect());
        }
        let centers = dirs
            .into_iter()
            .map(|d| d.into_iter().map(|x| x * CENTER_RADIUS).collect())
            .collect();
        Ok(Self {
            num_classes,
            dim,
            spread,
            centers,
        })
    }

    /// Draws `per_class` points per class, class-major order.
    pub fn sample<T: Real>(&self, per_class: usize, rng: &mut RngStream) -> Result<Dataset<T>> {
        if per_class == 0 {
            return Err(Error::domain("per_class must be ≥ 1"));
        }
        let n = self.num_classes * per_class;
        let mut data = Vec::with_capacity(n * self.dim);
        let mut labels = Vec::with_capacity(n);
        for (k, center) in self.centers.iter().enumerate() {
            for _ in 0..per_class {
                data.extend(center.iter().map(|&c| T::lit(c + self.spread * rng.normal())));
                labels.push(k);
            }
        }
        Dataset::new(Matrix::new(n, self.dim, data)?, labels, self.num_classes)
    }

    /// Bayes-optimal label (nearest center; priors equal, covariances equal).
    pub fn bayes_label(&self, x: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.centers.iter().enumerate() {
            let d: f64 = c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }
}

/// Class-balanced Gaussian blobs; centers and samples both follow `seed`.
pub fn gen_blobs<T: Real>(
    num_classes: usize,
    dim: usize,
    per_class: usize,
    spread: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    let spec = BlobSpec::new(num_classes, dim, spread, seed)?;
    spec.sample(per_class, &mut RngStream::new(seed, streams::DATA_SAMPLES))
}

/// Adds Gaussian noise of standard deviation `severity · 0.25 · std(features)`.
pub fn corrupt<T: Real>(data: &Dataset<T>, severity: u8, seed: u64) -> Result<Dataset<T>> {
    if !(1..=MAX_SEVERITY).contains(&severity) {
        return Err(Error::domain(format!(
            "severity {severity} outside 1..={MAX_SEVERITY}"
        )));
    }
    let sigma = severity_sigma(data, severity);
    let mut rng = RngStream::new(seed, streams::id(streams::CORRUPT, severity as usize, 0));
    let mut features = data.features.clone();
    for x in features.data_mut() {
        *x = T::lit(x.as_f64() + sigma * rng.normal());
    }
    Dataset::new(features, data.labels.clone(), data.num_classes)
}

/// Noise standard deviation used by [`corrupt`] at `severity`.
pub fn severity_sigma<T: Real>(data: &Dataset<T>, severity: u8) -> f64 {
    f64::from(severity) * SEVERITY_BASE_FRACTION * data.feature_std()
}

/// Train/validation/test partition.
#[derive(Debug, Clone, PartialEq)]
pub struct Split<T> {
    pub train: Dataset<T>,
    pub val: Dataset<T>,
    pub test: Dataset<T>,
}

/// Shuffles with `seed` and cuts into train/val/test by `fractions`.
pub fn split<T: Real>(data: &Dataset<T>, fractions: [f64; 3], seed: u64) -> Result<Split<T>> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|&f| !(f >= 0.0)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::domain(format!(
            "split fractions {fractions:?} must be non-negative and sum to 1"
        )));
    }
    let n = data.len();
    let n_train = (fractions[0] * n as f64).round() as usize;
    let n_val = ((fractions[1] * n as f64).round() as usize).min(n - n_train);
    let order = RngStream::new(seed, streams::SPLIT).permutation(n);
    let (train, rest) = order.split_at(n_train);
    let (val, test) = rest.split_at(n_val);
    Ok(Split {
        train: data.subset(train),
        val: data.subset(val),
        test: data.subset(test),
    })
}

/// Convex combinations of paired rows, with soft targets kept as
/// `(label_a, label_b, λ)` so any loss can consume them.
#[derive(Debug, Clone, PartialEq)]
pub struct MixupBatch<T> {
    pub mixed_features: Matrix<T>,
    pub label_pairs: Vec<(usize, usize)>,
    pub lambdas: Vec<T>,
    pub alpha: f64,
}

/// Mixes `a` and `b` row by row with `λ ~ Beta(α, α)` drawn per row.
pub fn mixup_batch<T: Real>(
    a: (&Matrix<T>, &[usize]),
    b: (&Matrix<T>, &[usize]),
    alpha: f64,
    rng: &mut RngStream,
) -> Result<MixupBatch<T>> {
    if !(alpha > 0.0) {
        return Err(Error::domain(format!("mixup alpha must be > 0, got {alpha}")));
    }
    let lambdas = (0..a.0.rows())
        .map(|_| rng.symmetric_beta(alpha).map(T::lit))
        .collect::<Result<Vec<_>>>()?;
    mix_with_lambdas(a, b, &lambdas, alpha)
}

/// Mixup with caller-supplied coefficients.
pub fn mix_with_lambdas<T: Real>(
    a: (&Matrix<T>, &[usize]),
    b: (&Matrix<T>, &[usize]),
    lambdas: &[T],
    alpha: f64,
) -> Result<MixupBatch<T>> {
    let (xa, ya) = a;
    let (xb, yb) = b;
    if xa.shape() != xb.shape() || ya.len() != xa.rows() || yb.len() != xb.rows() {
        return Err(Error::shape(
            "mixup_batch",
            format!("batches {:?} and {:?}", xa.shape(), xb.shape()),
        ));
    }
    if lambdas.len() != xa.rows() {
        return Err(Error::shape("mixup_batch", "one λ per row required"));
    }
    let mut mixed = Matrix::zeros(xa.rows(), xa.cols());
    for (r, &lam) in lambdas.iter().enumerate() {
        if !(lam >= T::zero() && lam <= T::one()) {
            return Err(Error::domain(format!("λ = {lam} outside [0, 1]")));
        }
        let rest = T::one() - lam;
        for ((out, &xi), &xj) in mixed.row_mut(r).iter_mut().zip(xa.row(r)).zip(xb.row(r)) {
            let lo = xi.min(xj);
            let hi = xi.max(xj);
            // Clamp absorbs the last-ulp rounding of the two products.
            *out = (lam * xi + rest * xj).max(lo).min(hi);
        }
    }
    Ok(MixupBatch {
        mixed_features: mixed,
        label_pairs: ya.iter().copied().zip(yb.iter().copied()).collect(),
        lambdas: lambdas.to_vec(),
        alpha,
    })
}

/// Writes `label,f0,...,f{d-1}` rows with 17 significant digits.
pub fn save_csv<T: Real>(data: &Dataset<T>, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header: Vec<String> = std::iter::once("label".to_string())
        .chain((0..data.dim()).map(|j| format!("f{j}")))
        .collect();
    let mut line = header.join(",");
    line.push('\n');
    w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    for (r, &y) in data.labels.iter().enumerate() {
        line.clear();
        line.push_str(&y.to_string());
        for x in data.features.row(r) {
            line.push(',');
            line.push_str(&format!("{:.16e}", x.as_f64()));
        }
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a dataset written by [`save_csv`]. `num_classes` defaults to
/// `max(label) + 1` when not given.
pub fn load_csv<T: Real>(path: &Path, num_classes: Option<usize>) -> Result<Dataset<T>> {
    let csv_err = |detail: String| Error::Csv {
        path: path.to_path_buf(),
        detail,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| csv_err(e.to_string()))?.clone();
    if headers.get(0) != Some("label") {
        return Err(csv_err("first column must be `label`".into()));
    }
    for (j, h) in headers.iter().skip(1).enumerate() {
        if h != format!("f{j}") {
            return Err(csv_err(format!("column {} should be f{j}, found {h}", j + 1)));
        }
    }
    let dim = headers.len() - 1;
    let mut labels = Vec::new();
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_err(e.to_string()))?;
        let row = i + 2;
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|e| csv_err(format!("line {row}: bad label {:?}: {e}", &record[0])))?;
        labels.push(label);
        for field in record.iter().skip(1) {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|e| csv_err(format!("line {row}: bad value {field:?}: {e}")))?;
            values.push(T::lit(x));
        }
    }
    let k = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
    Dataset::new(Matrix::new(labels.len(), dim, values)?, labels, k)
}
