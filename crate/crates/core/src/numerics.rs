//! Dense row-major matrices, the seeded random source, and small statistics
//! helpers shared by every other module.
//!
//! Everything is `f64`. Reductions run left to right in index order so that
//! results are bitwise reproducible.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Diagonal regularizer added to every fitted covariance.
pub const COVARIANCE_REGULARIZER: f64 = 1e-9;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        check_len("Matrix::new", rows * cols, data.len())?;
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            check_len("Matrix::from_rows", cols, r.as_ref().len())?;
            data.extend_from_slice(r.as_ref());
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a zero-column matrix has no row data anyway
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        check_len("Matrix::matmul", self.cols, other.rows)?;
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("Matrix::matvec", self.cols, v.len())?;
        Ok(self.iter_rows().map(|row| dot(row, v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn transpose_matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_len("Matrix::transpose_matvec", self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (row, &vi) in self.iter_rows().zip(v) {
            axpy(vi, row, &mut out);
        }
        Ok(out)
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|x| *x *= alpha);
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        check_len("Matrix::add_assign", self.data.len(), other.data.len())?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Sum of squares of all entries.
    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Principal square root of a symmetric positive semidefinite matrix.
    ///
    /// Negative eigenvalues produced by rounding are clamped to zero; the
    /// return flag reports whether any clamp was significant (below
    /// `-1e-10` relative to the spectral radius).
    pub fn psd_sqrt(&self) -> Result<(Matrix, bool)> {
        check_len("Matrix::psd_sqrt", self.rows, self.cols)?;
        let n = self.rows;
        let sym = DMatrix::from_fn(n, n, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)));
        let eig = SymmetricEigen::new(sym);
        let scale = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
        let mut clamped = false;
        let roots: Vec<f64> = eig
            .eigenvalues
            .iter()
            .map(|&l| {
                if l < -1e-10 * scale.max(1.0) {
                    clamped = true;
                }
                l.max(0.0).sqrt()
            })
            .collect();
        let q = &eig.eigenvectors;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for (k, r) in roots.iter().enumerate() {
                    s += q[(i, k)] * r * q[(j, k)];
                }
                out.set(i, j, s);
            }
        }
        Ok((out, clamped))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Seeded random source.
///
/// Uniform draws come from ChaCha8 (`rand_chacha`, seeded with
/// `seed_from_u64`) as 53-bit floats in `[0, 1)`. Normal draws use the
/// Box–Muller transform on consecutive uniform pairs `(u1, u2)`:
/// `sqrt(-2 ln(1 - u1)) * cos(2π u2)` followed by the matching `sin` value.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    /// Identifier recorded in run reports.
    pub const GENERATOR: &'static str = "chacha8(seed_from_u64)+box-muller";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream derived from this generator's seed.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
            spare: None,
        }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = std::f64::consts::TAU * u2;
        self.spare = Some(r * theta.sin());
        r * theta.cos()
    }

    /// Draws an index from an (unnormalized) weight vector.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            if u < *w {
                return i;
            }
            u -= w;
        }
        weights.len() - 1
    }
}

/// `rows × cols` matrix of i.i.d. standard normal draws, filled row by row.
pub fn sample_standard_normal(rng: &mut Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
    Matrix { rows, cols, data }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= total);
    out
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Sample mean and unbiased covariance (plus [`COVARIANCE_REGULARIZER`]·I).
pub fn fit_gaussian(samples: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let m = samples.rows();
    if m < 2 {
        return Err(Error::TooFewSamples { needed: 2, found: m });
    }
    let n = samples.cols();
    let mut mean = vec![0.0; n];
    for row in samples.iter_rows() {
        axpy(1.0, row, &mut mean);
    }
    mean.iter_mut().for_each(|x| *x /= m as f64);
    let mut cov = Matrix::zeros(n, n);
    for row in samples.iter_rows() {
        for i in 0..n {
            let di = row[i] - mean[i];
            for j in 0..n {
                cov.data[i * n + j] += di * (row[j] - mean[j]);
            }
        }
    }
    cov.scale(1.0 / (m as f64 - 1.0));
    for i in 0..n {
        cov.data[i * n + i] += COVARIANCE_REGULARIZER;
    }
    Ok((mean, cov))
}
