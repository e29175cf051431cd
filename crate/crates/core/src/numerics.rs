//! Dense row-major matrices, the seeded random stream, and a central-difference
//! gradient oracle.
//!
//! # Random streams
//!
//! [`Rng`] is ChaCha8 (the `rand_chacha` implementation) keyed with
//! `seed_from_u64(seed)` and switched to an explicit 64-bit stream id. Uniform
//! reals take the top 53 bits of a `u64` draw; normal draws use the
//! Box–Muller transform on a pair of uniforms and cache the second variate.
//! ChaCha output is defined byte-for-byte, so streams are identical on every
//! platform for a given `(seed, stream)`.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry ({}, {}) is {}",
                pos / cols,
                pos % cols,
                data[pos]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, row)| row.len() != c) {
            return Err(Error::invalid(format!(
                "row {i} has {} entries, expected {c}",
                row.len()
            )));
        }
        Self::new(r, c, rows.iter().flatten().copied().collect())
    }

    /// Single-row matrix.
    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(1, n, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub(crate) fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub(crate) fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Matrix::new(self.rows, other.cols, out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Matrix {
            rows: self.cols,
            cols: self.rows,
            data: out,
        }
    }

    fn zip_with(&self, other: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| f(*a, *b)).collect();
        Matrix::new(self.rows, self.cols, data)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| f(*v)).collect(),
        }
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row_broadcast(&self, row: &Matrix) -> Result<Matrix> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::shape("add_row_broadcast", self.shape(), row.shape()));
        }
        let mut out = self.clone();
        for r in 0..self.rows {
            for (o, b) in out.row_mut(r).iter_mut().zip(&row.data) {
                *o += b;
            }
        }
        Ok(out)
    }

    /// Sum over rows, as a `1 x cols` matrix.
    pub fn column_sums(&self) -> Matrix {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        Matrix {
            rows: 1,
            cols: self.cols,
            data: out,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        if idx.is_empty() {
            return Err(Error::invalid("select_rows with an empty index set"));
        }
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(Error::invalid(format!(
                    "row index {i} out of range for {} rows",
                    self.rows
                )));
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        })
    }

    /// Stacks matrices vertically.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("vstack of zero matrices"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != first.cols {
                return Err(Error::shape("vstack", first.shape(), p.shape()));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Matrix {
            rows,
            cols: first.cols,
            data,
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(pos) => Err(Error::NonFinite(format!(
                "{what}: entry ({}, {}) is {}",
                pos / self.cols,
                pos % self.cols,
                self.data[pos]
            ))),
        }
    }
}

/// Deterministic random stream. See the module docs for the pinned algorithm.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent stream derived from the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Rng {
            inner,
            spare_normal: None,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. Panics on `n == 0`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n as u64) as usize
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - u lies in (0, 1], so the log is finite.
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Partial Fisher–Yates: `k` distinct indices from `0..n` (all of them when `k >= n`).
    pub fn sample_indices(&mut self, n: usize, k: usize) -> Vec<usize> {
        let k = k.min(n);
        let mut pool: Vec<usize> = (0..n).collect();
        for i in 0..k {
            let j = i + self.below(n - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// `rows x cols` i.i.d. normal draws, row-major, advancing `rng`.
pub fn rng_normal(rng: &mut Rng, rows: usize, cols: usize, mean: f64, std: f64) -> Result<Matrix> {
    if !(std >= 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(Error::invalid(format!(
            "normal draw needs finite mean and std >= 0, got mean={mean} std={std}"
        )));
    }
    let data = (0..rows * cols)
        .map(|_| mean + std * rng.standard_normal())
        .collect();
    Matrix::new(rows, cols, data)
}

/// Central-difference gradient `(L(p + h e_j) - L(p - h e_j)) / 2h` for every entry of `params`.
pub fn finite_diff_gradient(
    mut loss_fn: impl FnMut(&Matrix) -> f64,
    params: &Matrix,
    h: f64,
) -> Result<Matrix> {
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("step h must be positive, got {h}")));
    }
    let mut probe = params.clone();
    let mut grad = vec![0.0; params.data.len()];
    for (j, g) in grad.iter_mut().enumerate() {
        let orig = params.data[j];
        probe.data[j] = orig + h;
        let plus = loss_fn(&probe);
        probe.data[j] = orig - h;
        let minus = loss_fn(&probe);
        probe.data[j] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss evaluation at component {j} gave {plus} / {minus}"
            )));
        }
        *g = (plus - minus) / (2.0 * h);
    }
    Matrix::new(params.rows, params.cols, grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(Matrix::identity(2).matmul(&a).unwrap(), a);
        let b = m(&[&[5.0], &[6.0]]);
        assert_eq!(a.matmul(&b).unwrap(), m(&[&[17.0], &[39.0]]));
    }

    #[test]
    fn matmul_dimension_error_names_shapes() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::zeros(4, 2);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("4x2"), "{err}");
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(Matrix::new(0, 2, vec![]).is_err());
        assert!(Matrix::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(Matrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn normal_degenerate_and_deterministic() {
        let mut rng = Rng::new(3);
        let z = rng_normal(&mut rng, 4, 5, 2.5, 0.0).unwrap();
        assert!(z.data().iter().all(|v| *v == 2.5));

        let a = rng_normal(&mut Rng::new(11), 3, 3, 0.0, 1.0).unwrap();
        let b = rng_normal(&mut Rng::new(11), 3, 3, 0.0, 1.0).unwrap();
        assert_eq!(a, b);
        assert!(rng_normal(&mut Rng::new(1), 1, 1, 0.0, -1.0).is_err());
    }

    #[test]
    fn normal_sample_mean_within_five_sigma() {
        let n = 100_000;
        let (mean, std) = (1.5, 2.0);
        let draws = rng_normal(&mut Rng::new(2024), n, 1, mean, std).unwrap();
        let sample_mean = draws.sum() / n as f64;
        assert!((sample_mean - mean).abs() < 5.0 * std / (n as f64).sqrt());
    }

    #[test]
    fn streams_differ_but_repeat() {
        let a: Vec<u64> = {
            let mut r = Rng::with_stream(5, 1);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let b: Vec<u64> = {
            let mut r = Rng::with_stream(5, 2);
            (0..4).map(|_| r.next_u64()).collect()
        };
        let a2: Vec<u64> = {
            let mut r = Rng::with_stream(5, 1);
            (0..4).map(|_| r.next_u64()).collect()
        };
        assert_ne!(a, b);
        assert_eq!(a, a2);
    }

    #[test]
    fn sample_indices_are_distinct() {
        let mut rng = Rng::new(9);
        let mut idx = rng.sample_indices(20, 7);
        assert_eq!(idx.len(), 7);
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 7);
        assert_eq!(rng.sample_indices(3, 10).len(), 3);
    }

    #[test]
    fn finite_differences_on_analytic_losses() {
        let zero = finite_diff_gradient(|_| 7.0, &Matrix::zeros(1, 3), 1e-5).unwrap();
        assert!(zero.data().iter().all(|v| *v == 0.0));

        let p = Matrix::row_vector(vec![1.0, 2.0]).unwrap();
        let g = finite_diff_gradient(|t| 0.5 * t.data().iter().map(|v| v * v).sum::<f64>(), &p, 1e-5).unwrap();
        assert!((g.get(0, 0) - 1.0).abs() < 1e-8);
        assert!((g.get(0, 1) - 2.0).abs() < 1e-8);

        let p = Matrix::row_vector(vec![3.0, 4.0]).unwrap();
        let g = finite_diff_gradient(|t| t.get(0, 0) * t.get(0, 1), &p, 1e-5).unwrap();
        assert!((g.get(0, 0) - 4.0).abs() < 1e-8);
        assert!((g.get(0, 1) - 3.0).abs() < 1e-8);
    }

    #[test]
    fn finite_differences_report_non_finite_component() {
        let p = Matrix::row_vector(vec![1.0, 0.0]).unwrap();
        let err = finite_diff_gradient(|t| if t.get(0, 1) > 0.0 { f64::INFINITY } else { 0.0 }, &p, 1e-3)
            .unwrap_err()
            .to_string();
        assert!(err.contains("component 1"), "{err}");
        assert!(finite_diff_gradient(|_| 0.0, &p, 0.0).is_err());
    }
}
