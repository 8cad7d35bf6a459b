//! Exact softmax attention and selection-quality metrics.

use std::collections::BTreeSet;

use crate::error::{LrqkError, Result};
use crate::matrix::{dot, topk_indices, Matrix, Rows};

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionResult {
    /// `1 × d`
    pub output: Matrix,
    pub weights: Vec<f64>,
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = w.iter().sum();
    for x in &mut w {
        *x /= sum;
    }
    w
}

/// `softmax(q Kᵀ / √d) · V` over every row of `keys`/`values`.
pub fn exact_attention<R: Rows + ?Sized>(
    q: &Matrix,
    keys: &R,
    values: &R,
) -> Result<AttentionResult> {
    let n = keys.row_count();
    if n == 0 {
        return Err(LrqkError::EmptyKeys);
    }
    let d = q.cols();
    if q.rows() != 1 || keys.width() != d || values.width() != d || values.row_count() != n {
        return Err(LrqkError::shape(
            "exact_attention",
            format!(
                "q {:?}, K {}x{}, V {}x{}",
                q.shape(),
                n,
                keys.width(),
                values.row_count(),
                values.width()
            ),
        ));
    }
    let scale = 1.0 / (d as f64).sqrt();
    let qs = q.as_slice();
    let logits: Vec<f64> = (0..n).map(|i| dot(qs, keys.row_at(i)) * scale).collect();
    let weights = softmax(&logits);
    let mut out = vec![0.0; d];
    for (i, &w) in weights.iter().enumerate() {
        for (o, &v) in out.iter_mut().zip(values.row_at(i)) {
            *o += w * v;
        }
    }
    Ok(AttentionResult {
        output: Matrix::row_vector(out)?,
        weights,
    })
}

/// Exact attention over the rows `idx` of a full history.
pub fn restricted_attention<R: Rows + ?Sized>(
    q: &Matrix,
    keys: &R,
    values: &R,
    idx: &[usize],
) -> Result<AttentionResult> {
    let (k, v) = (gather(keys, idx)?, gather(values, idx)?);
    exact_attention(q, &k, &v)
}

fn gather<R: Rows + ?Sized>(src: &R, idx: &[usize]) -> Result<Matrix> {
    let mut data = Vec::with_capacity(idx.len() * src.width());
    for &i in idx {
        if i >= src.row_count() {
            return Err(LrqkError::IndexOutOfRange {
                index: i,
                len: src.row_count(),
            });
        }
        data.extend_from_slice(src.row_at(i));
    }
    Matrix::new(idx.len(), src.width(), data)
}

/// Indices of the `k` largest logits `q Kᵀ`, ascending.
pub fn exact_topk<R: Rows + ?Sized>(q: &Matrix, keys: &R, k: usize) -> Result<Vec<usize>> {
    let n = keys.row_count();
    if n == 0 {
        return Err(LrqkError::EmptyKeys);
    }
    if q.shape() != (1, keys.width()) {
        return Err(LrqkError::shape(
            "exact_topk",
            format!("q {:?}, key width {}", q.shape(), keys.width()),
        ));
    }
    let logits: Vec<f64> = (0..n).map(|i| dot(q.as_slice(), keys.row_at(i))).collect();
    Ok(topk_indices(&logits, k))
}

/// `|proxy ∩ exact| / |exact|`.
pub fn selection_recall(proxy: &[usize], exact: &[usize]) -> Result<f64> {
    let exact: BTreeSet<usize> = exact.iter().copied().collect();
    if exact.is_empty() {
        return Err(LrqkError::Undefined("recall against an empty exact set"));
    }
    let proxy: BTreeSet<usize> = proxy.iter().copied().collect();
    Ok(proxy.intersection(&exact).count() as f64 / exact.len() as f64)
}
