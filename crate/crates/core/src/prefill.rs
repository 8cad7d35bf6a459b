//! Joint rank-r factorization of the prompt's query and key matrices.
//!
//! The objective couples the attention logits with the two reconstructions:
//!
//! ```text
//! L = ½‖QKᵀ − A_Q A_Kᵀ‖² + (λ_Q/2)‖Q − A_Q B_Q‖² + (λ_K/2)‖K − A_K B_K‖²
//! ```
//!
//! and is minimized by block coordinate descent, each block taking its exact
//! closed-form minimizer in the order `B_Q, B_K, A_K, A_Q`. Nothing `l × l`
//! is ever materialized: every product is re-associated through the
//! `d`- or `r`-wide side.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LrqkError, Result};
use crate::matrix::{fro_norm_sq, gram, solve_spd, topk_indices, Matrix};

/// Query and key matrices of one head over the prompt (`l × d` each).
#[derive(Debug, Clone)]
pub struct PrefillInput {
    q: Matrix,
    k: Matrix,
}

impl PrefillInput {
    pub fn new(q: Matrix, k: Matrix) -> Result<Self> {
        if q.shape() != k.shape() {
            return Err(LrqkError::shape(
                "PrefillInput",
                format!("Q is {:?}, K is {:?}", q.shape(), k.shape()),
            ));
        }
        Ok(Self { q, k })
    }

    pub fn q(&self) -> &Matrix {
        &self.q
    }

    pub fn k(&self) -> &Matrix {
        &self.k
    }

    /// Sequence length `l`.
    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    /// Head dimension `d`.
    pub fn dim(&self) -> usize {
        self.q.cols()
    }

    pub fn into_parts(self) -> (Matrix, Matrix) {
        (self.q, self.k)
    }
}

/// The two right factors carried forward into decode.
#[derive(Debug, Clone, PartialEq)]
pub struct Projections {
    pub b_q: Matrix,
    pub b_k: Matrix,
}

impl Projections {
    pub fn rank(&self) -> usize {
        self.b_q.rows()
    }

    pub fn dim(&self) -> usize {
        self.b_q.cols()
    }
}

/// `Q ≈ A_Q B_Q`, `K ≈ A_K B_K`, `QKᵀ ≈ A_Q A_Kᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    pub a_q: Matrix,
    pub a_k: Matrix,
    pub b_q: Matrix,
    pub b_k: Matrix,
}

impl LowRankFactors {
    pub fn rank(&self) -> usize {
        self.a_q.cols()
    }

    pub fn len(&self) -> usize {
        self.a_q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.a_q.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.b_q.cols()
    }

    pub fn all_finite(&self) -> bool {
        self.a_q.all_finite()
            && self.a_k.all_finite()
            && self.b_q.all_finite()
            && self.b_k.all_finite()
    }

    /// Splits off the compact key proxies `A_K` and the decode projections.
    /// `A_Q` is not needed past prefill.
    pub fn into_decode_parts(self) -> (Matrix, Projections) {
        (
            self.a_k,
            Projections {
                b_q: self.b_q,
                b_k: self.b_k,
            },
        )
    }

    fn check_against(&self, input: &PrefillInput) -> Result<()> {
        let (l, d, r) = (input.len(), input.dim(), self.rank());
        let ok = self.a_q.shape() == (l, r)
            && self.a_k.shape() == (l, r)
            && self.b_q.shape() == (r, d)
            && self.b_k.shape() == (r, d);
        if ok {
            Ok(())
        } else {
            Err(LrqkError::shape(
                "LowRankFactors",
                format!(
                    "A_Q {:?}, A_K {:?}, B_Q {:?}, B_K {:?} against l={l}, d={d}",
                    self.a_q.shape(),
                    self.a_k.shape(),
                    self.b_q.shape(),
                    self.b_k.shape()
                ),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum InitStrategy {
    /// Standard normal `A_Q`, `A_K` drawn from a seeded stream.
    Randn { seed: u64 },
    /// `A_Q` and `A_K` copy the `r` columns of `Q` and `K` with the largest
    /// L1 mass, chosen independently.
    #[serde(rename = "top")]
    TopR,
    /// Both copy the same `r` columns, ranked by the combined L1 mass.
    #[serde(rename = "topcol")]
    TopCol,
}

impl Default for InitStrategy {
    fn default() -> Self {
        InitStrategy::Randn { seed: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrefillConfig {
    pub rank: usize,
    pub lambda_pq: f64,
    pub lambda_pk: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub init: InitStrategy,
}

impl Default for PrefillConfig {
    fn default() -> Self {
        Self {
            rank: 32,
            lambda_pq: 1.0,
            lambda_pk: 1.0,
            max_iter: 2,
            tol: 0.01,
            init: InitStrategy::default(),
        }
    }
}

impl PrefillConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(LrqkError::InvalidConfig("rank must be at least 1".into()));
        }
        if self.rank > dim {
            return Err(LrqkError::RankTooLarge {
                rank: self.rank,
                dim,
            });
        }
        for (name, v) in [("lambda_pq", self.lambda_pq), ("lambda_pk", self.lambda_pk)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LrqkError::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(LrqkError::InvalidConfig("tol must be positive".into()));
        }
        if self.max_iter == 0 {
            return Err(LrqkError::InvalidConfig(
                "max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Column-wise L1 mass of `Q`, `K` and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub s_q: Vec<f64>,
    pub s_k: Vec<f64>,
    pub s_qk: Vec<f64>,
}

fn column_abs_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v.abs();
        }
    }
    s
}

pub fn importance_scores(input: &PrefillInput) -> ImportanceScores {
    let s_q = column_abs_sums(input.q());
    let s_k = column_abs_sums(input.k());
    let s_qk = s_q.iter().zip(&s_k).map(|(a, b)| a + b).collect();
    ImportanceScores { s_q, s_k, s_qk }
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::from_raw(rows, cols, data)
}

/// Initial `A_Q`, `A_K`; `B_Q`, `B_K` start at zero and are overwritten by
/// the first sweep before they are read.
pub fn init_factors(input: &PrefillInput, cfg: &PrefillConfig) -> Result<LowRankFactors> {
    cfg.validate(input.dim())?;
    let (l, d, r) = (input.len(), input.dim(), cfg.rank);
    let (a_q, a_k) = match cfg.init {
        InitStrategy::Randn { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a_q = gaussian(l, r, &mut rng);
            let a_k = gaussian(l, r, &mut rng);
            (a_q, a_k)
        }
        InitStrategy::TopR => {
            let scores = importance_scores(input);
            let a_q = input.q().select_cols(&topk_indices(&scores.s_q, r))?;
            let a_k = input.k().select_cols(&topk_indices(&scores.s_k, r))?;
            (a_q, a_k)
        }
        InitStrategy::TopCol => {
            let scores = importance_scores(input);
            let shared = topk_indices(&scores.s_qk, r);
            (
                input.q().select_cols(&shared)?,
                input.k().select_cols(&shared)?,
            )
        }
    };
    Ok(LowRankFactors {
        a_q,
        a_k,
        b_q: Matrix::zeros(r, d),
        b_k: Matrix::zeros(r, d),
    })
}

/// `‖QKᵀ − A_Q A_Kᵀ‖²` through `d × d` and `r × r` Gram products:
/// `⟨QᵀQ, KᵀK⟩ − 2⟨QᵀA_Q, KᵀA_K⟩ + ⟨A_QᵀA_Q, A_KᵀA_K⟩`.
///
/// Cancellation limits the absolute accuracy to roughly `1e-15·‖QKᵀ‖²`;
/// the result is clamped at zero.
pub fn logit_residual_sq(input: &PrefillInput, a_q: &Matrix, a_k: &Matrix) -> Result<f64> {
    let (q, k) = (input.q(), input.k());
    let full = gram(q).inner(&gram(k))?;
    let cross = q.t_matmul(a_q)?.inner(&k.t_matmul(a_k)?)?;
    let approx = gram(a_q).inner(&gram(a_k))?;
    Ok((full - 2.0 * cross + approx).max(0.0))
}

/// The relaxed prefill objective.
pub fn lagrangian_value(
    input: &PrefillInput,
    f: &LowRankFactors,
    cfg: &PrefillConfig,
) -> Result<f64> {
    f.check_against(input)?;
    let logits = logit_residual_sq(input, &f.a_q, &f.a_k)?;
    let q_res = fro_norm_sq(&input.q().sub(&f.a_q.matmul(&f.b_q)?)?);
    let k_res = fro_norm_sq(&input.k().sub(&f.a_k.matmul(&f.b_k)?)?);
    Ok(0.5 * logits + 0.5 * cfg.lambda_pq * q_res + 0.5 * cfg.lambda_pk * k_res)
}

/// Least-squares right factor: `B = (AᵀA)⁻¹ AᵀX`.
pub fn update_b(a: &Matrix, x: &Matrix) -> Result<Matrix> {
    if a.rows() != x.rows() {
        return Err(LrqkError::shape(
            "update_b",
            format!("A {:?} against X {:?}", a.shape(), x.shape()),
        ));
    }
    // Bᵀ (AᵀA) = XᵀA
    let bt = solve_spd(&gram(a), &x.t_matmul(a)?)?;
    Ok(bt.transpose())
}

/// Exact minimizer over one left factor. `x`/`y` are the matrix being
/// fitted and its partner, `partner_a` the partner's left factor and `b`,
/// `lambda` the fitted side's right factor and weight:
///
/// `A = X (Yᵀ A_partner + λ Bᵀ) (A_partnerᵀ A_partner + λ B Bᵀ)⁻¹`
fn update_left(
    x: &Matrix,
    y: &Matrix,
    partner_a: &Matrix,
    b: &Matrix,
    lambda: f64,
) -> Result<Matrix> {
    let mut inner = y.t_matmul(partner_a)?; // d × r
    inner.add_scaled(lambda, &b.transpose())?;
    let rhs = x.matmul(&inner)?; // l × r
    let mut system = gram(partner_a);
    system.add_scaled(lambda, &b.matmul_t(b)?)?;
    solve_spd(&system, &rhs)
}

pub fn update_ak(input: &PrefillInput, f: &LowRankFactors, cfg: &PrefillConfig) -> Result<Matrix> {
    f.check_against(input)?;
    update_left(input.k(), input.q(), &f.a_q, &f.b_k, cfg.lambda_pk)
}

pub fn update_aq(input: &PrefillInput, f: &LowRankFactors, cfg: &PrefillConfig) -> Result<Matrix> {
    f.check_against(input)?;
    update_left(input.q(), input.k(), &f.a_k, &f.b_q, cfg.lambda_pq)
}

/// One full sweep in the order `B_Q, B_K, A_K, A_Q`.
pub fn sweep(input: &PrefillInput, f: &mut LowRankFactors, cfg: &PrefillConfig) -> Result<()> {
    f.b_q = update_b(&f.a_q, input.q())?;
    f.b_k = update_b(&f.a_k, input.k())?;
    f.a_k = update_ak(input, f, cfg)?;
    f.a_q = update_aq(input, f, cfg)?;
    if !f.all_finite() {
        return Err(LrqkError::NonFinite("prefill sweep"));
    }
    Ok(())
}

fn mean_sq_change(new: &Matrix, old: &Matrix) -> f64 {
    let n = new.as_slice().len().max(1) as f64;
    let s: f64 = new
        .as_slice()
        .iter()
        .zip(old.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    s / n
}

/// Convergence metric: mean over the four factors of their per-element
/// mean squared change.
pub fn factor_change(new: &LowRankFactors, old: &LowRankFactors) -> f64 {
    (mean_sq_change(&new.a_q, &old.a_q)
        + mean_sq_change(&new.a_k, &old.a_k)
        + mean_sq_change(&new.b_q, &old.b_q)
        + mean_sq_change(&new.b_k, &old.b_k))
        / 4.0
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct PrefillTrace {
    /// Objective at initialization followed by one entry per sweep.
    pub lagrangian: Vec<f64>,
    /// Factor change per sweep.
    pub factor_change: Vec<f64>,
    pub converged: bool,
}

impl PrefillTrace {
    pub fn sweeps(&self) -> usize {
        self.factor_change.len()
    }
}

pub fn prefill_factorize(input: &PrefillInput, cfg: &PrefillConfig) -> Result<LowRankFactors> {
    run_prefill(input, cfg, false).map(|(f, _)| f)
}

/// Like [`prefill_factorize`] but also records the objective per sweep.
pub fn prefill_factorize_traced(
    input: &PrefillInput,
    cfg: &PrefillConfig,
) -> Result<(LowRankFactors, PrefillTrace)> {
    run_prefill(input, cfg, true)
}

fn run_prefill(
    input: &PrefillInput,
    cfg: &PrefillConfig,
    traced: bool,
) -> Result<(LowRankFactors, PrefillTrace)> {
    let mut f = init_factors(input, cfg)?;
    let mut trace = PrefillTrace::default();
    if traced {
        trace.lagrangian.push(lagrangian_value(input, &f, cfg)?);
    }
    // At least one sweep always runs.
    for _ in 0..cfg.max_iter {
        let prev = f.clone();
        sweep(input, &mut f, cfg)?;
        let change = factor_change(&f, &prev);
        trace.factor_change.push(change);
        if traced {
            trace.lagrangian.push(lagrangian_value(input, &f, cfg)?);
        }
        if change <= cfg.tol {
            trace.converged = true;
            break;
        }
    }
    Ok((f, trace))
}

/// Relative reconstruction errors of a factorization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Residuals {
    pub q_rel: f64,
    pub k_rel: f64,
    pub qk_rel: f64,
}

fn rel(num_sq: f64, den_sq: f64) -> f64 {
    if den_sq > 0.0 {
        (num_sq / den_sq).sqrt()
    } else {
        num_sq.sqrt()
    }
}

pub fn relative_residuals(input: &PrefillInput, f: &LowRankFactors) -> Result<Residuals> {
    f.check_against(input)?;
    let q_res = fro_norm_sq(&input.q().sub(&f.a_q.matmul(&f.b_q)?)?);
    let k_res = fro_norm_sq(&input.k().sub(&f.a_k.matmul(&f.b_k)?)?);
    let logits = logit_residual_sq(input, &f.a_q, &f.a_k)?;
    let logits_norm = gram(input.q()).inner(&gram(input.k()))?;
    Ok(Residuals {
        q_rel: rel(q_res, fro_norm_sq(input.q())),
        k_rel: rel(k_res, fro_norm_sq(input.k())),
        qk_rel: rel(logits, logits_norm),
    })
}
