//! Dense row-major matrices, a seedable platform-independent rng, and the
//! scalar helpers (softmax, quantiles, pairwise-distance medians, a small
//! linear solver) shared by every other module.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum NumericsError {
    #[error("singular matrix: pivot magnitude {pivot:e} below threshold {threshold:e}")]
    SingularMatrix { pivot: f64, threshold: f64 },
    #[error("empty input")]
    EmptyInput,
}

/// Dense row-major f64 matrix. Entries are required to be finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data length mismatch");
        assert!(data.iter().all(|v| v.is_finite()), "non-finite matrix entry");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let mut data = Vec::with_capacity(r * c);
        for row in &rows {
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// New matrix keeping the rows listed in `indices`, in that order.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix { rows: indices.len(), cols: self.cols, data }
    }

    /// Column-wise concatenation: rows of `self` followed by rows of `other`.
    pub fn hcat(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "hcat row mismatch");
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Matrix { rows: self.rows, cols, data }
    }

    /// New matrix keeping columns `0..width` of every row.
    pub fn left_cols(&self, width: usize) -> Matrix {
        assert!(width <= self.cols);
        let mut data = Vec::with_capacity(self.rows * width);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[..width]);
        }
        Matrix { rows: self.rows, cols: width, data }
    }

    pub fn add_scaled(&mut self, other: &Matrix, factor: f64) {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += factor * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for a in &mut self.data {
            *a *= factor;
        }
    }
}

// Serialized as nested row arrays so model/scenario JSON stays human-readable.
impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> = (0..self.rows).map(|i| self.row(i)).collect();
        rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(deserializer)?;
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(D::Error::custom("non-finite matrix entry"));
        }
        Ok(Matrix::from_rows(rows))
    }
}

/// SplitMix64 finalizer; used to turn substream labels into seed offsets.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Seedable rng: ChaCha8 keyed by a 64-bit seed. The same seed produces the
/// same stream on every platform. Substreams are derived by XORing the seed
/// with a SplitMix64-mixed label, so adding a consumer with a new label never
/// perturbs existing streams.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for (this seed, label).
    pub fn substream(&self, label: u64) -> Rng {
        Rng::new(self.seed ^ splitmix64(label))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, n). Multiply-shift on the raw 64-bit output;
    /// the tiny modulo bias (n << 2^64) is irrelevant here and the mapping is
    /// frozen by this code rather than by library internals.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as usize
    }

    pub fn normal(&mut self, mean: f64, sd: f64) -> f64 {
        assert!(sd >= 0.0, "negative standard deviation");
        if sd == 0.0 {
            return mean;
        }
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + sd * z
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    /// `k` distinct indices drawn from 0..n (partial Fisher-Yates), in draw order.
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        assert!(k <= n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Matrix with i.i.d. Normal(mean, sd^2) entries, filled in row-major order.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, mean: f64, sd: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.normal(mean, sd)).collect();
    Matrix::new(rows, cols, data)
}

/// Solve `a x = b` by Gaussian elimination with partial pivoting. `a` must be
/// square. Fails with `SingularMatrix` when the best available pivot falls
/// below 1e-12 times the largest initial row norm.
pub fn solve_linear_system(a: &Matrix, b: &[f64]) -> Result<Vec<f64>, NumericsError> {
    let n = a.rows();
    assert_eq!(a.cols(), n, "matrix must be square");
    assert_eq!(b.len(), n, "rhs length mismatch");

    let mut m = a.clone();
    let mut x = b.to_vec();
    let max_row_norm = (0..n)
        .map(|i| m.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0_f64, f64::max);
    let threshold = 1e-12 * max_row_norm;

    for k in 0..n {
        let pivot_row = (k..n)
            .max_by(|&r, &s| m.get(r, k).abs().total_cmp(&m.get(s, k).abs()))
            .unwrap();
        let pivot = m.get(pivot_row, k);
        if pivot.abs() < threshold || pivot == 0.0 {
            return Err(NumericsError::SingularMatrix { pivot: pivot.abs(), threshold });
        }
        if pivot_row != k {
            for j in 0..n {
                let (vk, vp) = (m.get(k, j), m.get(pivot_row, j));
                m.set(k, j, vp);
                m.set(pivot_row, j, vk);
            }
            x.swap(k, pivot_row);
        }
        for r in k + 1..n {
            let factor = m.get(r, k) / pivot;
            if factor == 0.0 {
                continue;
            }
            for j in k..n {
                let v = m.get(r, j) - factor * m.get(k, j);
                m.set(r, j, v);
            }
            x[r] -= factor * x[k];
        }
    }

    for k in (0..n).rev() {
        let mut acc = x[k];
        for j in k + 1..n {
            acc -= m.get(k, j) * x[j];
        }
        x[k] = acc / m.get(k, k);
    }
    Ok(x)
}

/// Numerically stable softmax. The exponentials are summed in value-sorted
/// order, which makes the result exactly equivariant under permutations of
/// the input (same multiset of addends, same summation order).
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    assert!(!scores.is_empty(), "softmax of empty score vector");
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let mut sorted = exps.clone();
    sorted.sort_by(f64::total_cmp);
    let denom: f64 = sorted.iter().sum();
    exps.iter().map(|e| e / denom).collect()
}

/// Lower empirical alpha-quantile: the ceil(alpha*n)-th smallest value for
/// alpha > 0, the minimum for alpha = 0. The product gets a 1e-9 downward
/// nudge before ceil so binary float slop cannot shift the order statistic.
pub fn quantile(values: &[f64], alpha: f64) -> Result<f64, NumericsError> {
    if values.is_empty() {
        return Err(NumericsError::EmptyInput);
    }
    debug_assert!((0.0..=1.0).contains(&alpha), "alpha outside [0,1]");
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    if alpha <= 0.0 {
        return Ok(sorted[0]);
    }
    let n = sorted.len();
    let k = (alpha * n as f64 - 1e-9).ceil().max(1.0) as usize;
    Ok(sorted[k.min(n) - 1])
}

/// Median squared Euclidean distance over all unordered pairs of the pooled
/// rows of `x` and `y` (self-pairs excluded). Returns 1 when there are no
/// pairs or every distance is zero, as a safe kernel-bandwidth fallback.
pub fn median_pairwise_sq_distance(x: &Matrix, y: &Matrix) -> f64 {
    assert!(x.rows() == 0 || y.rows() == 0 || x.cols() == y.cols());
    let mut pooled: Vec<&[f64]> = Vec::with_capacity(x.rows() + y.rows());
    pooled.extend((0..x.rows()).map(|i| x.row(i)));
    pooled.extend((0..y.rows()).map(|i| y.row(i)));

    let n = pooled.len();
    let mut dists = Vec::with_capacity(n.saturating_sub(1) * n / 2);
    for i in 0..n {
        for j in i + 1..n {
            let d = sq_distance(pooled[i], pooled[j]);
            dists.push(d);
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(f64::total_cmp);
    let mid = dists.len() / 2;
    let med = if dists.len() % 2 == 1 {
        dists[mid]
    } else {
        0.5 * (dists[mid - 1] + dists[mid])
    };
    if med > 0.0 {
        med
    } else {
        1.0
    }
}

pub(crate) fn sq_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}
