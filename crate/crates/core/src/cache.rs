//! Two-tier KV cache with hit/miss transfer accounting.
//!
//! The slow tier is append-only and holds every token's full-precision key
//! and value rows. The fast tier holds only the rows selected at the last
//! step. Compact key proxies (`A_K`, one `r`-wide row per token) are kept
//! fully resident and drive selection. Only rows missing from the fast tier
//! are read from the slow tier; those reads are the transfers counted by
//! [`CacheStats`].

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;

use crate::error::{LrqkError, Result};
pub use crate::matrix::RowStore;
use crate::matrix::{dot, topk_indices, Matrix};

/// Proxy logits `A_K q̂ᵀ` over every stored token. Unscaled and without
/// softmax, since only their ordering is consumed.
pub fn proxy_scores(q_hat: &Matrix, a_k_store: &RowStore) -> Result<Vec<f64>> {
    if q_hat.shape() != (1, a_k_store.width()) {
        return Err(LrqkError::shape(
            "proxy_scores",
            format!(
                "q_hat {:?} against proxy width {}",
                q_hat.shape(),
                a_k_store.width()
            ),
        ));
    }
    let q = q_hat.as_slice();
    Ok(a_k_store.rows().map(|row| dot(row, q)).collect())
}

/// Token indices resident after a step: `omega_k` (top proxy scores) and
/// `omega_l` (most recent tokens, always including the current one).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SelectionSet {
    pub step: usize,
    pub omega_k: Vec<usize>,
    pub omega_l: Vec<usize>,
    pub omega: Vec<usize>,
}

impl SelectionSet {
    pub fn len(&self) -> usize {
        self.omega.len()
    }

    pub fn is_empty(&self) -> bool {
        self.omega.is_empty()
    }
}

/// Lite tokens take the `lite_budget` most recent indices up to and
/// including `t`; active tokens are the top `k_budget` proxy scores among
/// the remaining older indices.
pub fn select_active(
    scores: &[f64],
    t: usize,
    k_budget: usize,
    lite_budget: usize,
) -> Result<SelectionSet> {
    if scores.len() <= t {
        return Err(LrqkError::shape(
            "select_active",
            format!("{} scores cannot cover token {t}", scores.len()),
        ));
    }
    let lite_start = (t + 1).saturating_sub(lite_budget);
    let omega_l: Vec<usize> = (lite_start..=t).collect();
    let omega_k = topk_indices(&scores[..lite_start], k_budget);
    // every active index precedes lite_start, so concatenation stays sorted
    let omega = omega_k.iter().chain(&omega_l).copied().collect();
    Ok(SelectionSet {
        step: t,
        omega_k,
        omega_l,
        omega,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct StepTransfer {
    pub step: usize,
    pub miss: usize,
    pub selected: usize,
}

impl StepTransfer {
    pub fn hit(&self) -> usize {
        self.selected - self.miss
    }

    pub fn miss_rate(&self) -> f64 {
        if self.selected == 0 {
            0.0
        } else {
            self.miss as f64 / self.selected as f64
        }
    }
}

/// Cumulative slow-to-fast transfer counters.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CacheStats {
    pub c_miss: u64,
    pub c_total: u64,
    pub per_step: Vec<StepTransfer>,
}

impl CacheStats {
    pub fn record(&mut self, step: usize, miss: usize, selected: usize) {
        debug_assert!(miss <= selected);
        self.c_miss += miss as u64;
        self.c_total += selected as u64;
        self.per_step.push(StepTransfer {
            step,
            miss,
            selected,
        });
    }

    pub fn miss_rate(&self) -> Result<f64> {
        if self.c_total == 0 {
            return Err(LrqkError::Undefined("miss rate with no selected rows"));
        }
        Ok(self.c_miss as f64 / self.c_total as f64)
    }

    /// Mean of the per-step miss rates, or `None` before the first step.
    pub fn mean_step_miss_rate(&self) -> Option<f64> {
        if self.per_step.is_empty() {
            return None;
        }
        let sum: f64 = self.per_step.iter().map(StepTransfer::miss_rate).sum();
        Some(sum / self.per_step.len() as f64)
    }

    /// Writes `step,selected,miss,hit,miss_rate`, one row per decode step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "selected", "miss", "hit", "miss_rate"])?;
        for s in &self.per_step {
            w.write_record([
                s.step.to_string(),
                s.selected.to_string(),
                s.miss.to_string(),
                s.hit().to_string(),
                s.miss_rate().to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Histogram of per-step miss rates over `bins` equal bins on `[0, 1]`.
    pub fn miss_rate_histogram(&self, bins: usize) -> Vec<(f64, f64, usize)> {
        let bins = bins.max(1);
        let mut counts = vec![0usize; bins];
        for s in &self.per_step {
            let b = ((s.miss_rate() * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
        }
        counts
            .into_iter()
            .enumerate()
            .map(|(i, c)| (i as f64 / bins as f64, (i + 1) as f64 / bins as f64, c))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct FastRow {
    k: Vec<f64>,
    v: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TieredKVCache {
    slow_k: RowStore,
    slow_v: RowStore,
    proxies: RowStore,
    fast: BTreeMap<usize, FastRow>,
    k_budget: usize,
    lite_budget: usize,
}

impl TieredKVCache {
    pub fn new(dim: usize, rank: usize, k_budget: usize, lite_budget: usize) -> Result<Self> {
        if k_budget == 0 || lite_budget == 0 {
            return Err(LrqkError::InvalidConfig(
                "cache budgets must be at least 1".into(),
            ));
        }
        Ok(Self {
            slow_k: RowStore::new(dim),
            slow_v: RowStore::new(dim),
            proxies: RowStore::new(rank),
            fast: BTreeMap::new(),
            k_budget,
            lite_budget,
        })
    }

    /// Loads a prompt: every row goes to the slow tier, `a_k` becomes the
    /// proxy store and the fast tier holds the trailing lite window. Seeding
    /// is not a decode step and records no transfers.
    pub fn seed_prompt(&mut self, k: &Matrix, v: &Matrix, a_k: &Matrix) -> Result<()> {
        if k.shape() != v.shape()
            || k.rows() != a_k.rows()
            || k.cols() != self.dim()
            || a_k.cols() != self.rank()
        {
            return Err(LrqkError::shape(
                "seed_prompt",
                format!(
                    "K {:?}, V {:?}, A_K {:?}",
                    k.shape(),
                    v.shape(),
                    a_k.shape()
                ),
            ));
        }
        if !self.is_empty() {
            return Err(LrqkError::InvalidConfig(
                "prompt must seed an empty cache".into(),
            ));
        }
        for i in 0..k.rows() {
            self.slow_k.push(k.row(i))?;
            self.slow_v.push(v.row(i))?;
            self.proxies.push(a_k.row(i))?;
        }
        let start = k.rows().saturating_sub(self.lite_budget);
        for i in start..k.rows() {
            self.fast.insert(
                i,
                FastRow {
                    k: k.row(i).to_vec(),
                    v: v.row(i).to_vec(),
                },
            );
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.slow_k.width()
    }

    pub fn rank(&self) -> usize {
        self.proxies.width()
    }

    pub fn k_budget(&self) -> usize {
        self.k_budget
    }

    pub fn lite_budget(&self) -> usize {
        self.lite_budget
    }

    /// Tokens stored in the slow tier.
    pub fn len(&self) -> usize {
        self.slow_k.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slow_k.is_empty()
    }

    pub fn proxies(&self) -> &RowStore {
        &self.proxies
    }

    pub fn slow_keys(&self) -> &RowStore {
        &self.slow_k
    }

    pub fn slow_values(&self) -> &RowStore {
        &self.slow_v
    }

    pub fn resident_indices(&self) -> Vec<usize> {
        self.fast.keys().copied().collect()
    }

    pub fn resident_len(&self) -> usize {
        self.fast.len()
    }

    /// Proxy and key rows of the fast tier, in ascending index order.
    pub fn resident_rows(&self) -> Result<(Matrix, Matrix)> {
        let idx = self.resident_indices();
        let mut keys = Vec::with_capacity(idx.len() * self.dim());
        for row in self.fast.values() {
            keys.extend_from_slice(&row.k);
        }
        Ok((
            self.proxies.select(&idx)?,
            Matrix::new(idx.len(), self.dim(), keys)?,
        ))
    }

    /// Appends token `t` to the slow tier and the proxy store, and places its
    /// rows in the fast tier for the current step. The slow-tier write is
    /// synchronous. Returns the new token's index.
    pub fn append_token(&mut self, k_t: &Matrix, v_t: &Matrix, k_hat: &Matrix) -> Result<usize> {
        if k_t.shape() != (1, self.dim())
            || v_t.shape() != (1, self.dim())
            || k_hat.shape() != (1, self.rank())
        {
            return Err(LrqkError::shape(
                "append_token",
                format!(
                    "k {:?}, v {:?}, k_hat {:?}",
                    k_t.shape(),
                    v_t.shape(),
                    k_hat.shape()
                ),
            ));
        }
        let t = self.slow_k.push(k_t.as_slice())?;
        self.slow_v.push(v_t.as_slice())?;
        self.proxies.push(k_hat.as_slice())?;
        self.fast.insert(
            t,
            FastRow {
                k: k_t.as_slice().to_vec(),
                v: v_t.as_slice().to_vec(),
            },
        );
        Ok(t)
    }

    /// Reads rows of `sel.omega` missing from the fast tier out of the slow
    /// tier, records the transfer and makes `sel.omega` the new fast set.
    /// Returns the K and V rows of `sel.omega` in ascending index order.
    pub fn fetch_and_merge(
        &mut self,
        sel: &SelectionSet,
        stats: &mut CacheStats,
    ) -> Result<(Matrix, Matrix)> {
        let len = self.len();
        if let Some(&bad) = sel.omega.iter().find(|&&i| i >= len) {
            return Err(LrqkError::IndexOutOfRange { index: bad, len });
        }
        let d = self.dim();
        let mut next = BTreeMap::new();
        let mut misses = 0usize;
        for &i in &sel.omega {
            let row = match self.fast.remove(&i) {
                Some(row) => row,
                None => {
                    misses += 1;
                    FastRow {
                        k: self.slow_k.row(i).expect("bounds checked").to_vec(),
                        v: self.slow_v.row(i).expect("bounds checked").to_vec(),
                    }
                }
            };
            next.insert(i, row);
        }
        // rows not re-selected drop out of the fast tier; the slow tier keeps them
        self.fast = next;
        stats.record(sel.step, misses, sel.omega.len());

        let mut keys = Vec::with_capacity(self.fast.len() * d);
        let mut values = Vec::with_capacity(self.fast.len() * d);
        for row in self.fast.values() {
            keys.extend_from_slice(&row.k);
            values.extend_from_slice(&row.v);
        }
        let n = self.fast.len();
        Ok((Matrix::new(n, d, keys)?, Matrix::new(n, d, values)?))
    }
}
