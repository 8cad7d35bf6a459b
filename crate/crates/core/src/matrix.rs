//! Dense row-major matrices and the handful of kernels the pipeline needs:
//! products, Gram matrices, small SPD right-solves, Frobenius norms and top-k.
//!
//! Row vectors are `1 × n` matrices throughout, so every solve follows the
//! right-multiplication convention `X · M = RHS`.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{LrqkError, Result};

/// Relative diagonal jitter applied to singular SPD systems.
pub const SPD_JITTER: f64 = 1e-10;

/// Relative symmetry tolerance accepted by [`solve_spd`].
const SYMMETRY_TOL: f64 = 1e-10;

/// Pivots at or below this fraction of the largest diagonal entry count as
/// a failed factorization.
const PIVOT_FLOOR: f64 = 1e-14;

#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LrqkError::shape(
                "Matrix::new",
                format!("{} entries for a {rows}x{cols} matrix", data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LrqkError::NonFinite("Matrix::new"));
        }
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
            m[(i, i)] = 1.0;
        }
        m
    }

    /// A `1 × n` row vector.
    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(1, n, values)
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(LrqkError::shape(
                    "Matrix::from_rows",
                    format!("row {i} has {} entries, expected {cols}", row.len()),
                ));
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

    /// Wraps data computed internally from finite inputs. Finiteness is
    /// re-checked by the callers that can actually overflow.
    pub(crate) fn from_raw(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, and a zero-width matrix still has rows
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · rhs`
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(LrqkError::shape(
                "matmul",
                format!("{:?} x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let n = rhs.cols;
        let mut out = vec![0.0; self.rows * n];
        for i in 0..self.rows {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out_row.iter_mut().zip(rhs.row(p)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(self.rows, n, out))
    }

    /// `self · rhsᵀ`
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(LrqkError::shape(
                "matmul_t",
                format!("{:?} x {:?}ᵀ", self.shape(), rhs.shape()),
            ));
        }
        let mut out = Vec::with_capacity(self.rows * rhs.rows);
        for a in self.row_iter() {
            for b in rhs.row_iter() {
                out.push(dot(a, b));
            }
        }
        Ok(Matrix::from_raw(self.rows, rhs.rows, out))
    }

    /// `selfᵀ · rhs`
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(LrqkError::shape(
                "t_matmul",
                format!("{:?}ᵀ x {:?}", self.shape(), rhs.shape()),
            ));
        }
        let (m, n) = (self.cols, rhs.cols);
        let mut out = vec![0.0; m * n];
        for (a_row, b_row) in self.row_iter().zip(rhs.row_iter()) {
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in out[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix::from_raw(m, n, out))
    }

    fn check_same_shape(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(LrqkError::shape(
                op,
                format!("{:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix::from_raw(self.rows, self.cols, data))
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_raw(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Frobenius inner product `⟨self, other⟩`.
    pub fn inner(&self, other: &Matrix) -> Result<f64> {
        self.check_same_shape(other, "inner")?;
        Ok(dot(&self.data, &other.data))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            if i >= self.rows {
                return Err(LrqkError::IndexOutOfRange {
                    index: i,
                    len: self.rows,
                });
            }
            data.extend_from_slice(self.row(i));
        }
        Ok(Matrix::from_raw(idx.len(), self.cols, data))
    }

    pub fn select_cols(&self, idx: &[usize]) -> Result<Matrix> {
        if let Some(&bad) = idx.iter().find(|&&j| j >= self.cols) {
            return Err(LrqkError::IndexOutOfRange {
                index: bad,
                len: self.cols,
            });
        }
        let mut data = Vec::with_capacity(self.rows * idx.len());
        for row in self.row_iter() {
            data.extend(idx.iter().map(|&j| row[j]));
        }
        Ok(Matrix::from_raw(self.rows, idx.len(), data))
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        assert!(start <= end && end <= self.rows, "row range out of bounds");
        Matrix::from_raw(
            end - start,
            self.cols,
            self.data[start * self.cols..end * self.cols].to_vec(),
        )
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for row in self.row_iter().take(8) {
            writeln!(f, "  {row:?}")?;
        }
        if self.rows > 8 {
            writeln!(f, "  ... ({} more rows)", self.rows - 8)?;
        }
        write!(f, "]")
    }
}

/// Growable row-major table with a fixed row width.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RowStore {
    width: usize,
    data: Vec<f64>,
}

impl RowStore {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            data: Vec::new(),
        }
    }

    pub fn from_matrix(m: &Matrix) -> Self {
        Self {
            width: m.cols(),
            data: m.as_slice().to_vec(),
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.width).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, row: &[f64]) -> Result<usize> {
        if row.len() != self.width {
            return Err(LrqkError::shape(
                "RowStore::push",
                format!("row of {} into width {}", row.len(), self.width),
            ));
        }
        self.data.extend_from_slice(row);
        Ok(self.len() - 1)
    }

    pub fn row(&self, i: usize) -> Option<&[f64]> {
        let start = i.checked_mul(self.width)?;
        self.data.get(start..start + self.width)
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.width.max(1))
    }

    pub fn select(&self, idx: &[usize]) -> Result<Matrix> {
        let mut data = Vec::with_capacity(idx.len() * self.width);
        for &i in idx {
            let row = self.row(i).ok_or(LrqkError::IndexOutOfRange {
                index: i,
                len: self.len(),
            })?;
            data.extend_from_slice(row);
        }
        Matrix::new(idx.len(), self.width, data)
    }

    pub fn to_matrix(&self) -> Matrix {
        Matrix::from_raw(self.len(), self.width, self.data.clone())
    }
}

/// Read access to a table of equally wide rows.
pub trait Rows {
    fn row_count(&self) -> usize;
    fn width(&self) -> usize;
    fn row_at(&self, i: usize) -> &[f64];
}

impl Rows for Matrix {
    fn row_count(&self) -> usize {
        self.rows
    }

    fn width(&self) -> usize {
        self.cols
    }

    fn row_at(&self, i: usize) -> &[f64] {
        self.row(i)
    }
}

impl Rows for RowStore {
    fn row_count(&self) -> usize {
        self.len()
    }

    fn width(&self) -> usize {
        self.width
    }

    fn row_at(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `AᵀA`, mirrored from the upper triangle so the result is exactly symmetric.
pub fn gram(a: &Matrix) -> Matrix {
    let n = a.cols();
    let mut out = Matrix::zeros(n, n);
    for row in a.row_iter() {
        for i in 0..n {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for (o, &rj) in out.data[i * n + i..(i + 1) * n].iter_mut().zip(&row[i..]) {
                *o += ri * rj;
            }
        }
    }
    for i in 0..n {
        for j in 0..i {
            out.data[i * n + j] = out.data[j * n + i];
        }
    }
    out
}

pub fn fro_norm_sq(a: &Matrix) -> f64 {
    a.as_slice().iter().map(|v| v * v).sum()
}

/// Lower Cholesky factor of `m` (row-major), or `None` when a pivot drops to
/// the floor.
fn cholesky(m: &Matrix) -> Option<Vec<f64>> {
    let n = m.rows();
    let max_diag = (0..n).map(|i| m[(i, i)].abs()).fold(0.0_f64, f64::max);
    let floor = PIVOT_FLOOR * max_diag;
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = m[(j, j)];
        for p in 0..j {
            d -= l[j * n + p] * l[j * n + p];
        }
        // also rejects NaN
        if d.partial_cmp(&floor) != Some(std::cmp::Ordering::Greater) {
            return None;
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = m[(i, j)];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / d;
        }
    }
    Some(l)
}

/// Solves `L Lᵀ x = b` in place.
fn cholesky_solve_in_place(l: &[f64], n: usize, x: &mut [f64]) {
    for i in 0..n {
        let mut s = x[i];
        for p in 0..i {
            s -= l[i * n + p] * x[p];
        }
        x[i] = s / l[i * n + i];
    }
    for i in (0..n).rev() {
        let mut s = x[i];
        for p in i + 1..n {
            s -= l[p * n + i] * x[p];
        }
        x[i] = s / l[i * n + i];
    }
}

/// Right-solve `X · M = RHS` for symmetric positive (semi)definite `M`.
///
/// Singular systems are retried once with `SPD_JITTER · (trace(M)/r + 1) · I`
/// added to the diagonal.
pub fn solve_spd(m: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    let r = m.rows();
    if m.cols() != r {
        return Err(LrqkError::shape(
            "solve_spd",
            format!("M is {:?}", m.shape()),
        ));
    }
    if rhs.cols() != r {
        return Err(LrqkError::shape(
            "solve_spd",
            format!("RHS {:?} against M {:?}", rhs.shape(), m.shape()),
        ));
    }
    if !m.all_finite() || !rhs.all_finite() {
        return Err(LrqkError::NonFinite("solve_spd"));
    }
    let scale = m.as_slice().iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    for i in 0..r {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale.max(f64::MIN_POSITIVE) {
                return Err(LrqkError::SolveFailed(format!(
                    "matrix not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    if r == 0 {
        return Ok(Matrix::zeros(rhs.rows(), 0));
    }

    let l = match cholesky(m) {
        Some(l) => l,
        None => {
            let jitter = SPD_JITTER * (m.trace() / r as f64 + 1.0);
            let mut jittered = m.clone();
            for i in 0..r {
                jittered[(i, i)] += jitter;
            }
            cholesky(&jittered).ok_or_else(|| {
                LrqkError::SolveFailed(format!(
                    "{r}x{r} system not positive definite after jitter {jitter:e}"
                ))
            })?
        }
    };

    // M symmetric, so X·M = RHS row-wise is M·xᵀ = bᵀ.
    let mut out = rhs.clone();
    for i in 0..out.rows() {
        cholesky_solve_in_place(&l, r, out.row_mut(i));
    }
    if !out.all_finite() {
        return Err(LrqkError::NonFinite("solve_spd"));
    }
    Ok(out)
}

/// Descending by score, ascending by index on ties.
fn score_order(scores: &[f64], a: usize, b: usize) -> Ordering {
    scores[b].total_cmp(&scores[a]).then(a.cmp(&b))
}

/// Indices of the `min(k, len)` largest scores, returned in ascending index
/// order. Ties go to the lower index.
pub fn topk_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len();
    if k == 0 || n == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..n).collect();
    if k < n {
        idx.select_nth_unstable_by(k - 1, |&a, &b| score_order(scores, a, b));
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}
