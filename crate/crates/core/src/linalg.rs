//! Small numeric building blocks shared across modules: a compressed sparse
//! row matrix, a banded SPD solver and a few dense helpers.

use nalgebra::{DMatrix, DVector};
use std::collections::BTreeMap;

/// Compressed sparse row matrix with sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Builds from (row, col, value) triplets; duplicates are summed.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut rows: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); nrows];
        for &(r, c, v) in triplets {
            *rows[r].entry(c).or_insert(0.0) += v;
        }
        let mut row_ptr = Vec::with_capacity(nrows + 1);
        let mut col_idx = Vec::new();
        let mut values = Vec::new();
        row_ptr.push(0);
        for row in rows {
            for (c, v) in row {
                col_idx.push(c);
                values.push(v);
            }
            row_ptr.push(col_idx.len());
        }
        CsrMatrix { nrows, ncols, row_ptr, col_idx, values }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Iterates over `(col, value)` of one row.
    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        self.col_idx[span.clone()].iter().copied().zip(self.values[span].iter().copied())
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.row_ptr[r]..self.row_ptr[r + 1];
        match self.col_idx[span.clone()].binary_search(&c) {
            Ok(pos) => self.values[span.start + pos],
            Err(_) => 0.0,
        }
    }

    pub fn diagonal(&self) -> DVector<f64> {
        DVector::from_iterator(self.nrows, (0..self.nrows).map(|i| self.get(i, i)))
    }

    pub fn mul_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.nrows);
        for r in 0..self.nrows {
            y[r] = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
        y
    }

    pub fn mul_dense(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = DMatrix::zeros(self.nrows, x.ncols());
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                for j in 0..x.ncols() {
                    y[(r, j)] += v * x[(c, j)];
                }
            }
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(self.nrows, self.ncols);
        for r in 0..self.nrows {
            for (c, v) in self.row(r) {
                d[(r, c)] = v;
            }
        }
        d
    }
}

/// Symmetric positive definite band matrix stored by lower diagonals.
///
/// `bands[k][i]` holds entry `(i + k, i)`.
#[derive(Debug, Clone)]
pub struct SymBand {
    n: usize,
    bands: Vec<Vec<f64>>,
}

impl SymBand {
    pub fn zeros(n: usize, half_bandwidth: usize) -> Self {
        let bands = (0..=half_bandwidth).map(|k| vec![0.0; n.saturating_sub(k)]).collect();
        SymBand { n, bands }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Adds `v` to entry (i, j) and, implicitly, (j, i).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        self.bands[hi - lo][lo] += v;
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (hi, lo) = if i >= j { (i, j) } else { (j, i) };
        let k = hi - lo;
        if k < self.bands.len() {
            self.bands[k][lo]
        } else {
            0.0
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let w = self.bands.len() - 1;
        (0..self.n)
            .map(|i| {
                let lo = i.saturating_sub(w);
                let hi = (i + w).min(self.n - 1);
                (lo..=hi).map(|j| self.get(i, j) * x[j]).sum()
            })
            .collect()
    }

    /// Solves `A x = b` by banded Cholesky. Returns `None` if `A` is not
    /// numerically positive definite.
    pub fn solve(&self, b: &[f64]) -> Option<Vec<f64>> {
        let n = self.n;
        let w = self.bands.len() - 1;
        // l[k][i] = L(i + k, i)
        let mut l: Vec<Vec<f64>> = self.bands.clone();
        for j in 0..n {
            let mut d = l[0][j];
            for k in 1..=w.min(j) {
                let v = l[k][j - k];
                d -= v * v;
            }
            if !(d > 0.0) || !d.is_finite() {
                return None;
            }
            let d = d.sqrt();
            l[0][j] = d;
            for k in 1..=w.min(n - 1 - j) {
                let i = j + k;
                let mut s = l[k][j];
                // sum over p < j of L(i,p) L(j,p)
                for p in i.saturating_sub(w)..j {
                    s -= l[i - p][p] * l[j - p][p];
                }
                l[k][j] = s / d;
            }
        }
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for p in i.saturating_sub(w)..i {
                s -= l[i - p][p] * y[p];
            }
            y[i] = s / l[0][i];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for q in (i + 1)..=(i + w).min(n - 1) {
                s -= l[q - i][i] * y[q];
            }
            y[i] = s / l[0][i];
        }
        Some(y)
    }
}

/// Upper-triangle entries (excluding the diagonal) in row-major order.
pub fn upper_triangle(m: &DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows();
    let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in (i + 1)..n {
            out.push(m[(i, j)]);
        }
    }
    out
}

/// Inverse of [`upper_triangle`]: rebuilds a symmetric matrix with the given diagonal.
pub fn from_upper_triangle(n: usize, upper: &[f64], diag: f64) -> DMatrix<f64> {
    let mut m = DMatrix::from_element(n, n, 0.0);
    let mut idx = 0;
    for i in 0..n {
        m[(i, i)] = diag;
        for j in (i + 1)..n {
            m[(i, j)] = upper[idx];
            m[(j, i)] = upper[idx];
            idx += 1;
        }
    }
    m
}

/// Index pairs `(i, j)`, `i < j`, matching [`upper_triangle`] ordering.
pub fn upper_pairs(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            out.push((i, j));
        }
    }
    out
}

/// Pearson correlation of two equal-length slices; `None` when either has zero variance.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for i in 0..m.nrows() {
        let max = (0..m.ncols()).map(|j| m[(i, j)]).fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for j in 0..m.ncols() {
            let e = (m[(i, j)] - max).exp();
            out[(i, j)] = e;
            sum += e;
        }
        for j in 0..m.ncols() {
            out[(i, j)] /= sum;
        }
    }
    out
}
