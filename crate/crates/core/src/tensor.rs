//! Dense row-major arrays and the small set of kernels the rest of the
//! crate is built on.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, values: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(shape_err(format!(
                "{} values cannot fill a {rows}x{cols} matrix",
                values.len()
            )));
        }
        Ok(Self { rows, cols, values })
    }

    /// Builds a matrix from nested rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            values.extend_from_slice(r.as_ref());
        }
        Self { rows: rows.len(), cols, values }
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

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.values[c * self.rows + r] = self.values[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// `out += self · x` for a column vector `x`.
    #[inline]
    pub fn mul_vec_acc(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(out.len(), self.rows);
        for (r, o) in out.iter_mut().enumerate() {
            *o += dot(self.row(r), x);
        }
    }

    /// `out += selfᵀ · y` for a column vector `y`.
    #[inline]
    pub fn tr_mul_vec_acc(&self, y: &[f64], out: &mut [f64]) {
        debug_assert_eq!(y.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        for (r, &yr) in y.iter().enumerate() {
            if yr != 0.0 {
                axpy(yr, self.row(r), out);
            }
        }
    }

    /// `self += a · bᵀ`.
    #[inline]
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar != 0.0 {
                let cols = self.cols;
                axpy(ar, b, &mut self.values[r * cols..(r + 1) * cols]);
            }
        }
    }
}

/// Four independent partial sums, so the adds pipeline instead of
/// waiting on each other. Deterministic for a given length.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha · x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let orow = &mut out.values[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.values[i * a.cols + k];
            axpy(aik, b.row(k), orow);
        }
    }
    Ok(out)
}

/// Row-wise softmax, stabilised by subtracting each row's maximum.
pub fn softmax_rows(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        // every entry is -inf (fully masked); leave a zero row
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid_matrix(a: &Matrix) -> Matrix {
    a.map(sigmoid)
}

pub fn tanh_matrix(a: &Matrix) -> Matrix {
    a.map(f64::tanh)
}

/// Rank-3 array laid out as `[batch][time][feature]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    batch: usize,
    time: usize,
    feature: usize,
    values: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(batch: usize, time: usize, feature: usize) -> Self {
        Self { batch, time, feature, values: vec![0.0; batch * time * feature] }
    }

    pub fn from_vec(batch: usize, time: usize, feature: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != batch * time * feature {
            return Err(shape_err(format!(
                "{} values cannot fill a [{batch}, {time}, {feature}] tensor",
                values.len()
            )));
        }
        Ok(Self { batch, time, feature, values })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.batch, self.time, self.feature]
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn feature(&self) -> usize {
        self.feature
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// The `time × feature` block of one sample.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.time * self.feature;
        &self.values[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [f64] {
        let n = self.time * self.feature;
        &mut self.values[b * n..(b + 1) * n]
    }

    pub fn sample_matrix(&self, b: usize) -> Matrix {
        Matrix { rows: self.time, cols: self.feature, values: self.sample(b).to_vec() }
    }

    pub fn step(&self, b: usize, t: usize) -> &[f64] {
        let start = (b * self.time + t) * self.feature;
        &self.values[start..start + self.feature]
    }

    pub fn step_mut(&mut self, b: usize, t: usize) -> &mut [f64] {
        let start = (b * self.time + t) * self.feature;
        &mut self.values[start..start + self.feature]
    }

    pub fn from_samples(samples: &[Matrix]) -> Result<Self> {
        let (time, feature) = samples.first().map_or((0, 0), Matrix::shape);
        let mut values = Vec::with_capacity(samples.len() * time * feature);
        for (i, s) in samples.iter().enumerate() {
            if s.shape() != (time, feature) {
                return Err(shape_err(format!(
                    "sample {i} is {:?}, expected {:?}",
                    s.shape(),
                    (time, feature)
                )));
            }
            values.extend_from_slice(s.values());
        }
        Ok(Self { batch: samples.len(), time, feature, values })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 { values: self.values.iter().map(|&v| f(v)).collect(), ..*self }
    }
}

/// Per-(sample, step) validity flags. Padding sits at the front of each row.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskMatrix {
    batch: usize,
    time: usize,
    flags: Vec<bool>,
}

impl MaskMatrix {
    pub fn all_valid(batch: usize, time: usize) -> Self {
        Self { batch, time, flags: vec![true; batch * time] }
    }

    pub fn from_flags(batch: usize, time: usize, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != batch * time {
            return Err(shape_err(format!(
                "{} flags cannot fill a [{batch}, {time}] mask",
                flags.len()
            )));
        }
        Ok(Self { batch, time, flags })
    }

    /// Mask whose row `b` has `valid[b]` trailing valid steps.
    pub fn left_padded(time: usize, valid: &[usize]) -> Self {
        let mut flags = Vec::with_capacity(valid.len() * time);
        for &v in valid {
            let v = v.min(time);
            flags.extend(std::iter::repeat_n(false, time - v));
            flags.extend(std::iter::repeat_n(true, v));
        }
        Self { batch: valid.len(), time, flags }
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn row(&self, b: usize) -> &[bool] {
        &self.flags[b * self.time..(b + 1) * self.time]
    }

    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        self.flags[b * self.time + t]
    }

    pub fn valid_count(&self, b: usize) -> usize {
        self.row(b).iter().filter(|&&f| f).count()
    }

    /// True when every row's valid flags form a contiguous suffix.
    pub fn is_left_padded(&self) -> bool {
        (0..self.batch).all(|b| {
            let row = self.row(b);
            let first = row.iter().position(|&f| f).unwrap_or(row.len());
            row[first..].iter().all(|&f| f)
        })
    }

    pub fn check_matches(&self, x: &Tensor3) -> Result<()> {
        if self.batch != x.batch || self.time != x.time {
            return Err(shape_err(format!(
                "mask [{}, {}] does not match features [{}, {}, {}]",
                self.batch, self.time, x.batch, x.time, x.feature
            )));
        }
        Ok(())
    }
}
