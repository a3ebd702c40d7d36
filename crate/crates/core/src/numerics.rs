//! Dense row-major matrices, activations and seeded random draws.
//!
//! Every reduction here runs in a single fixed order so that repeated runs on
//! identical inputs are bit-reproducible.

use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Row-major 2-D array of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Argument(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
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

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Argument(format!(
                    "row {i} has {} values, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn zeros_like(other: &Matrix) -> Self {
        Self::zeros(other.rows, other.cols)
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
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn expect_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op,
                left: self.shape(),
                right: other.shape(),
            });
        }
        Ok(())
    }

    /// Standard product `self · b`.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.rows, b.cols);
        out.add_matmul(self, b)?;
        Ok(out)
    }

    /// `self += a · b`
    pub fn add_matmul(&mut self, a: &Matrix, b: &Matrix) -> Result<()> {
        if a.cols != b.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: a.shape(),
                right: b.shape(),
            });
        }
        if self.shape() != (a.rows, b.cols) {
            return Err(Error::Shape {
                op: "matmul accumulate",
                left: self.shape(),
                right: (a.rows, b.cols),
            });
        }
        let n = b.cols;
        for i in 0..a.rows {
            let out_row = &mut self.data[i * n..(i + 1) * n];
            for k in 0..a.cols {
                let aik = a.data[i * a.cols + k];
                if aik == 0.0 {
                    continue;
                }
                let b_row = &b.data[k * n..(k + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += aik * bv;
                }
            }
        }
        Ok(())
    }

    /// `self += aᵀ · b`
    pub fn add_matmul_tn(&mut self, a: &Matrix, b: &Matrix) -> Result<()> {
        if a.rows != b.rows {
            return Err(Error::Shape {
                op: "matmul_tn",
                left: a.shape(),
                right: b.shape(),
            });
        }
        if self.shape() != (a.cols, b.cols) {
            return Err(Error::Shape {
                op: "matmul_tn accumulate",
                left: self.shape(),
                right: (a.cols, b.cols),
            });
        }
        let n = b.cols;
        for r in 0..a.rows {
            let b_row = &b.data[r * n..(r + 1) * n];
            for i in 0..a.cols {
                let ari = a.data[r * a.cols + i];
                if ari == 0.0 {
                    continue;
                }
                let out_row = &mut self.data[i * n..(i + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += ari * bv;
                }
            }
        }
        Ok(())
    }

    /// `self += a · bᵀ`
    pub fn add_matmul_nt(&mut self, a: &Matrix, b: &Matrix) -> Result<()> {
        if a.cols != b.cols {
            return Err(Error::Shape {
                op: "matmul_nt",
                left: a.shape(),
                right: b.shape(),
            });
        }
        if self.shape() != (a.rows, b.rows) {
            return Err(Error::Shape {
                op: "matmul_nt accumulate",
                left: self.shape(),
                right: (a.rows, b.rows),
            });
        }
        let k = a.cols;
        for i in 0..a.rows {
            let a_row = &a.data[i * k..(i + 1) * k];
            for j in 0..b.rows {
                let b_row = &b.data[j * k..(j + 1) * k];
                let dot: f64 = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                self.data[i * b.rows + j] += dot;
            }
        }
        Ok(())
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

    /// Elementwise product.
    pub fn hadamard(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_map(b, "hadamard", |x, y| x * y)
    }

    pub fn add(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_map(b, "add", |x, y| x + y)
    }

    pub fn sub(&self, b: &Matrix) -> Result<Matrix> {
        self.zip_map(b, "sub", |x, y| x - y)
    }

    pub fn add_assign(&mut self, b: &Matrix) -> Result<()> {
        self.expect_same_shape(b, "add_assign")?;
        for (x, y) in self.data.iter_mut().zip(&b.data) {
            *x += y;
        }
        Ok(())
    }

    pub fn zip_map(&self, b: &Matrix, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.expect_same_shape(b, op)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|x| x * s)
    }

    /// Adds a `1 × cols` row vector to every row.
    pub fn add_row_broadcast(&mut self, row: &Matrix) -> Result<()> {
        if row.rows != 1 || row.cols != self.cols {
            return Err(Error::Shape {
                op: "row broadcast",
                left: self.shape(),
                right: row.shape(),
            });
        }
        for r in 0..self.rows {
            for (x, b) in self.row_mut(r).iter_mut().zip(&row.data) {
                *x += b;
            }
        }
        Ok(())
    }

    /// `self (1 × cols) += column sums of m`
    pub fn add_col_sums(&mut self, m: &Matrix) -> Result<()> {
        if self.rows != 1 || self.cols != m.cols {
            return Err(Error::Shape {
                op: "column sum",
                left: self.shape(),
                right: m.shape(),
            });
        }
        for r in 0..m.rows {
            for (acc, v) in self.data.iter_mut().zip(m.row(r)) {
                *acc += v;
            }
        }
        Ok(())
    }

    /// Concatenates along columns: `[a | b]`.
    pub fn hconcat(a: &Matrix, b: &Matrix) -> Result<Matrix> {
        if a.rows != b.rows {
            return Err(Error::Shape {
                op: "hconcat",
                left: a.shape(),
                right: b.shape(),
            });
        }
        let mut out = Matrix::zeros(a.rows, a.cols + b.cols);
        for r in 0..a.rows {
            let row = out.row_mut(r);
            row[..a.cols].copy_from_slice(a.row(r));
            row[a.cols..].copy_from_slice(b.row(r));
        }
        Ok(out)
    }

    /// Splits columns at `at` into `(left, right)`.
    pub fn hsplit(&self, at: usize) -> Result<(Matrix, Matrix)> {
        if at > self.cols {
            return Err(Error::Argument(format!(
                "cannot split {} columns at {at}",
                self.cols
            )));
        }
        let mut left = Matrix::zeros(self.rows, at);
        let mut right = Matrix::zeros(self.rows, self.cols - at);
        for r in 0..self.rows {
            left.row_mut(r).copy_from_slice(&self.row(r)[..at]);
            right.row_mut(r).copy_from_slice(&self.row(r)[at..]);
        }
        Ok((left, right))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Logistic function, branching on sign so `exp` never overflows.
#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Matrix) -> Matrix {
    x.map(sigmoid_scalar)
}

pub fn tanh(x: &Matrix) -> Matrix {
    x.map(f64::tanh)
}

/// σ′ expressed through the forward output `y = σ(x)`.
#[inline]
pub fn sigmoid_grad_from_output(y: f64) -> f64 {
    y * (1.0 - y)
}

/// tanh′ expressed through the forward output `y = tanh(x)`.
#[inline]
pub fn tanh_grad_from_output(y: f64) -> f64 {
    1.0 - y * y
}

/// Seedable deterministic generator (ChaCha8 stream).
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator for a named sub-stream of this seed.
    pub fn derive(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Rng {
            seed: self.seed,
            inner,
        }
    }

    /// Uniform draw in `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform draw in `[lo, hi]`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        if std_dev == 0.0 {
            return mean;
        }
        Normal::new(mean, std_dev)
            .expect("finite positive standard deviation")
            .sample(&mut self.inner)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// `k` distinct items drawn without replacement from `pool`, in draw order.
    pub fn choose_distinct(&mut self, pool: &[usize], k: usize) -> Vec<usize> {
        let mut pool = pool.to_vec();
        // partial Fisher-Yates
        for i in 0..k.min(pool.len()) {
            let j = i + self.below(pool.len() - i);
            pool.swap(i, j);
        }
        pool.truncate(k);
        pool
    }
}

/// Matrix with entries drawn i.i.d. from `U[-scale, scale]`.
pub fn init_uniform(rows: usize, cols: usize, rng: &mut Rng, scale: f64) -> Result<Matrix> {
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Argument(format!(
            "initialization scale must be positive, got {scale}"
        )));
    }
    let data = (0..rows * cols).map(|_| rng.uniform(-scale, scale)).collect();
    Matrix::new(rows, cols, data)
}

/// Default initialization scale `1/√fan_in`.
pub fn fan_in_scale(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}
