//! Dense row-major matrices, elementwise kernels, softmax and seedable
//! random streams.
//!
//! Everything here is a pure function of its inputs except [`RngStream`],
//! which is a counter-based ChaCha generator addressed by `(seed, stream)`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix<T>", into = "RawMatrix<T>")]
#[serde(bound = "T: Real")]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

#[derive(Serialize, Deserialize)]
#[serde(bound = "T: Real")]
struct RawMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> TryFrom<RawMatrix<T>> for Matrix<T> {
    type Error = Error;

    fn try_from(raw: RawMatrix<T>) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl<T> From<Matrix<T>> for RawMatrix<T> {
    fn from(m: Matrix<T>) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl<T: Real> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "Matrix::new",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::one())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from `f64` rows; convenient for literals in tests.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("Matrix::from_rows", "ragged rows"));
        }
        let data = rows.iter().flatten().map(|&x| T::lit(x)).collect();
        Self::new(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: T) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    /// Standard product `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materialising the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("{:?}ᵀ x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = rhs.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == T::zero() {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ` without materialising the transpose.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", self.shape(), rhs.shape()),
            ));
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..rhs.rows {
                let dot = a_row
                    .iter()
                    .zip(rhs.row(j))
                    .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                out.data[i * rhs.rows + j] = dot;
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    fn zip_with(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        self.same_shape(other, op)?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// Adds `bias` to every row.
    pub fn add_bias(&self, bias: &[T]) -> Result<Self> {
        if bias.len() != self.cols {
            return Err(Error::shape(
                "add_bias",
                format!("bias of {} for {} columns", bias.len(), self.cols),
            ));
        }
        let mut out = self.clone();
        for r in 0..out.rows {
            for (x, &b) in out.row_mut(r).iter_mut().zip(bias) {
                *x = *x + b;
            }
        }
        Ok(out)
    }

    pub fn relu(&self) -> Self {
        self.map(|x| if x > T::zero() { x } else { T::zero() })
    }

    /// Derivative of the rectifier evaluated at pre-activations `self`:
    /// 1 where the input was positive, 0 elsewhere.
    pub fn relu_grad(&self) -> Self {
        self.map(|x| if x > T::zero() { T::one() } else { T::zero() })
    }

    /// Column sums, i.e. the bias gradient of a batch.
    pub fn col_sums(&self) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for r in 0..self.rows {
            for (o, &x) in out.iter_mut().zip(self.row(r)) {
                *o = *o + x;
            }
        }
        out
    }

    /// Row-wise softmax with per-row max subtraction.
    pub fn softmax_rows(&self) -> Self {
        let mut out = self.clone();
        for r in 0..out.rows {
            softmax_in_place(out.row_mut(r));
        }
        out
    }

    /// Index of the largest entry in row `r`; ties resolve to the lowest index.
    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }

    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows).map(|r| self.argmax_row(r)).collect()
    }

    pub fn row_max(&self, r: usize) -> T {
        self.row(r)
            .iter()
            .copied()
            .fold(T::neg_infinity(), |a, b| if b > a { b } else { a })
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_count(self.data.len().max(1))
    }
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    let mut total = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total = total + *x;
    }
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate().skip(1) {
        if x > row[best] {
            best = i;
        }
    }
    best
}

pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.matmul(b)
}

pub fn softmax_rows<T: Real>(logits: &Matrix<T>) -> Matrix<T> {
    logits.softmax_rows()
}

pub fn hadamard<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.hadamard(b)
}

/// Matrix of independent Bernoulli(`q`) draws in `{0, 1}`.
pub fn bernoulli_matrix<T: Real>(
    rows: usize,
    cols: usize,
    q: f64,
    rng: &mut RngStream,
) -> Result<Matrix<T>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::domain(format!("Bernoulli probability {q} outside [0, 1]")));
    }
    let data = (0..rows * cols)
        .map(|_| if rng.uniform() < q { T::one() } else { T::zero() })
        .collect();
    Matrix::new(rows, cols, data)
}

/// Stream ids used across the crate. Each purpose owns a disjoint id range
/// so draws for one purpose never perturb another.
pub mod streams {
    pub const DATA_CENTERS: u64 = 1;
    pub const DATA_SAMPLES: u64 = 2;
    pub const SPLIT: u64 = 3;
    pub const CORRUPT: u64 = 4;
    pub const EXTRACTOR_INIT: u64 = 5;
    pub const HEAD_INIT_STAGE1: u64 = 6;
    pub const HEAD_INIT_STAGE2: u64 = 7;
    pub const SHUFFLE_STAGE1: u64 = 8;
    pub const SHUFFLE_STAGE2: u64 = 9;
    pub const MIXUP: u64 = 10;
    pub const MASK: u64 = 11;
    pub const STATS_MASK: u64 = 12;
    pub const PROBE: u64 = 13;

    /// Combines a purpose tag with an epoch and a batch index into one id.
    pub fn id(tag: u64, epoch: usize, batch: usize) -> u64 {
        debug_assert!(epoch < (1 << 24) && batch < (1 << 24));
        (tag << 48) | ((epoch as u64) << 24) | batch as u64
    }
}

/// Counter-based random stream addressed by `(seed, stream)`.
///
/// Two streams with the same seed but different ids are independent ChaCha
/// keystreams; the same pair always yields the same sequence.
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    /// A fresh stream under the same seed.
    pub fn derive(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Uniform draw in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in `[-bound, bound)`.
    pub fn symmetric(&mut self, bound: f64) -> f64 {
        (2.0 * self.uniform() - 1.0) * bound
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Gamma(shape, 1) draw.
    pub fn gamma(&mut self, shape: f64) -> Result<f64> {
        let dist = Gamma::new(shape, 1.0)
            .map_err(|e| Error::domain(format!("gamma shape {shape}: {e}")))?;
        Ok(dist.sample(&mut self.inner))
    }

    /// Beta(alpha, alpha) via the ratio of two Gamma(alpha, 1) draws.
    pub fn symmetric_beta(&mut self, alpha: f64) -> Result<f64> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(Error::domain(format!("beta parameter {alpha} must be > 0")));
        }
        loop {
            let x = self.gamma(alpha)?;
            let y = self.gamma(alpha)?;
            let total = x + y;
            // Both draws can underflow to zero for tiny alpha.
            if total > 0.0 {
                return Ok(x / total);
            }
        }
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<X>(&mut self, items: &mut [X]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Matrix<f64> {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let id = m(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let b = m(&[vec![3.0, 4.0], vec![5.0, 6.0]]);
        assert_eq!(id.matmul(&b).unwrap(), b);

        let a = m(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = m(&[vec![5.0, 6.0], vec![7.0, 8.0]]);
        assert_eq!(
            a.matmul(&b).unwrap(),
            m(&[vec![19.0, 22.0], vec![43.0, 50.0]])
        );
    }

    #[test]
    fn matmul_zero_row() {
        let z = Matrix::<f64>::zeros(1, 4);
        let mut rng = RngStream::new(3, 0);
        let w = Matrix::from_fn(4, 3, |_, _| rng.normal());
        assert_eq!(z.matmul(&w).unwrap(), Matrix::zeros(1, 3));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::<f64>::zeros(2, 3);
        let b = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(Error::Shape { .. })));
        assert!(matches!(a.hadamard(&b.transpose()), Err(Error::Shape { .. })));
    }

    #[test]
    fn transposed_products_agree_with_explicit_transpose() {
        let mut rng = RngStream::new(9, 1);
        let a = Matrix::<f64>::from_fn(5, 3, |_, _| rng.normal());
        let b = Matrix::<f64>::from_fn(5, 4, |_, _| rng.normal());
        let c = Matrix::<f64>::from_fn(6, 3, |_, _| rng.normal());
        let lhs = a.t_matmul(&b).unwrap();
        let rhs = a.transpose().matmul(&b).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
        let lhs = a.matmul_t(&c).unwrap();
        let rhs = a.matmul(&c.transpose()).unwrap();
        for (x, y) in lhs.data().iter().zip(rhs.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let p = m(&[vec![0.0, 0.0]]).softmax_rows();
        assert_eq!(p.data(), &[0.5, 0.5]);

        for c in [-7.5, 0.0, 3.0, 250.0] {
            let p = m(&[vec![c, c + 3f64.ln()]]).softmax_rows();
            assert!((p.get(0, 0) - 0.25).abs() < 1e-12);
            assert!((p.get(0, 1) - 0.75).abs() < 1e-12);
        }

        let p = m(&[vec![1000.0, 1000.0]]).softmax_rows();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn bernoulli_degenerate_and_mean() {
        let mut rng = RngStream::new(1, 0);
        let ones: Matrix<f64> = bernoulli_matrix(7, 9, 1.0, &mut rng).unwrap();
        assert_eq!(ones, Matrix::ones(7, 9));
        let zeros: Matrix<f64> = bernoulli_matrix(7, 9, 0.0, &mut rng).unwrap();
        assert_eq!(zeros, Matrix::zeros(7, 9));

        let half: Matrix<f64> = bernoulli_matrix(100, 100, 0.5, &mut rng).unwrap();
        assert!(half.data().iter().all(|&x| x == 0.0 || x == 1.0));
        assert!((half.mean() - 0.5).abs() < 0.02);
    }

    #[test]
    fn bernoulli_rejects_bad_probability() {
        let mut rng = RngStream::new(1, 0);
        assert!(bernoulli_matrix::<f64>(2, 2, 1.5, &mut rng).is_err());
        assert!(bernoulli_matrix::<f64>(2, 2, -0.1, &mut rng).is_err());
        assert!(bernoulli_matrix::<f64>(2, 2, f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn bernoulli_is_reproducible_per_stream() {
        let a: Matrix<f64> = bernoulli_matrix(20, 20, 0.3, &mut RngStream::new(5, 77)).unwrap();
        let b: Matrix<f64> = bernoulli_matrix(20, 20, 0.3, &mut RngStream::new(5, 77)).unwrap();
        let c: Matrix<f64> = bernoulli_matrix(20, 20, 0.3, &mut RngStream::new(5, 78)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn hadamard_examples() {
        let a = m(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(a.hadamard(&Matrix::ones(2, 2)).unwrap(), a);
        assert_eq!(a.hadamard(&Matrix::zeros(2, 2)).unwrap(), Matrix::zeros(2, 2));
        let mask = m(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        assert_eq!(
            a.hadamard(&mask).unwrap(),
            m(&[vec![0.0, 2.0], vec![3.0, 0.0]])
        );
    }

    #[test]
    fn small_kernels() {
        let a = m(&[vec![-1.0, 2.0], vec![0.0, -3.0]]);
        assert_eq!(a.relu(), m(&[vec![0.0, 2.0], vec![0.0, 0.0]]));
        assert_eq!(a.relu_grad(), m(&[vec![0.0, 1.0], vec![0.0, 0.0]]));
        assert_eq!(
            a.add_bias(&[1.0, 1.0]).unwrap(),
            m(&[vec![0.0, 3.0], vec![1.0, -2.0]])
        );
        assert!(a.add_bias(&[1.0]).is_err());
        assert_eq!(a.col_sums(), vec![-1.0, -1.0]);
        assert_eq!(a.argmax_rows(), vec![1, 0]);
        assert_eq!(a.row_max(1), 0.0);
        assert_eq!(a.scale(2.0).get(1, 1), -6.0);
        assert_eq!(a.sub(&a).unwrap(), Matrix::zeros(2, 2));
        assert_eq!(a.transpose().get(0, 1), 0.0);
    }

    #[test]
    fn argmax_ties_take_lowest_index() {
        let a = m(&[vec![0.0, 0.0, 0.0], vec![1.0, 3.0, 3.0]]);
        assert_eq!(a.argmax_rows(), vec![0, 1]);
    }

    #[test]
    fn beta_one_is_uniform() {
        let mut rng = RngStream::new(11, 0);
        let draws: Vec<f64> = (0..10_000).map(|_| rng.symmetric_beta(1.0).unwrap()).collect();
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.5).abs() < 0.02, "mean {mean}");
        // Uniform(0,1) variance is 1/12.
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / draws.len() as f64;
        assert!((var - 1.0 / 12.0).abs() < 0.005, "var {var}");
        assert!(rng.symmetric_beta(0.0).is_err());
    }

    #[test]
    fn stream_ids_are_disjoint() {
        assert_ne!(
            streams::id(streams::MASK, 1, 0),
            streams::id(streams::MASK, 0, 1)
        );
        assert_ne!(
            streams::id(streams::MASK, 0, 0),
            streams::id(streams::SHUFFLE_STAGE2, 0, 0)
        );
    }

    #[test]
    fn matrix_serde_validates_length() {
        let ok: Matrix<f64> = serde_json::from_str(r#"{"rows":1,"cols":2,"data":[1.0,2.0]}"#).unwrap();
        assert_eq!(ok.shape(), (1, 2));
        let bad: std::result::Result<Matrix<f64>, _> =
            serde_json::from_str(r#"{"rows":2,"cols":2,"data":[1.0,2.0]}"#);
        assert!(bad.is_err());
    }
}
