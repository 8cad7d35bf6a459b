//! Per-token compression of `(q_t, k_t)` into rank-r rows, followed by one
//! exact line-search gradient step on each projection `B_Q`, `B_K`.
//!
//! The compressed rows minimize
//!
//! ```text
//! L = ½‖q̂ B_Q − q‖² + ½‖k̂ B_K − k‖² + (λ₁/2)(q̂ k̂ᵀ − q kᵀ)² + (λ₂/2)‖q̂ A_Ωᵀ − q K_Ωᵀ‖²
//! ```
//!
//! where `A_Ω`, `K_Ω` are the proxy and key rows resident in the fast tier at
//! the previous step. `q̂` and `k̂` are alternated, each by its closed form.

use serde::{Deserialize, Serialize};

use crate::error::{LrqkError, Result};
use crate::matrix::{dot, fro_norm_sq, gram, solve_spd, Matrix};
use crate::prefill::Projections;

/// Line-search denominators below this fraction of `1 + |numerator|` yield
/// a zero step.
const ETA_DENOM_FLOOR: f64 = 1e-14;

/// The projected query, key and value rows of the current token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStep {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl TokenStep {
    pub fn new(q: &[f64], k: &[f64], v: &[f64]) -> Result<Self> {
        if q.len() != k.len() || q.len() != v.len() {
            return Err(LrqkError::shape(
                "TokenStep",
                format!("q={}, k={}, v={}", q.len(), k.len(), v.len()),
            ));
        }
        Ok(Self {
            q: Matrix::row_vector(q.to_vec())?,
            k: Matrix::row_vector(k.to_vec())?,
            v: Matrix::row_vector(v.to_vec())?,
        })
    }

    pub fn dim(&self) -> usize {
        self.q.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedToken {
    pub q_hat: Matrix,
    pub k_hat: Matrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub lambda_d1: f64,
    pub lambda_d2: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            lambda_d1: 1.0,
            lambda_d2: 1.0,
            max_iter: 2,
            tol: 0.01,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_d1", self.lambda_d1), ("lambda_d2", self.lambda_d2)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LrqkError::InvalidConfig(format!(
                    "{name} must be finite and >= 0"
                )));
            }
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(LrqkError::InvalidConfig(
                "decode tol must be positive".into(),
            ));
        }
        if self.max_iter == 0 {
            return Err(LrqkError::InvalidConfig(
                "decode max_iter must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Intermediate quantities of one decode step, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeWorkspace {
    pub m_lq: Matrix,
    pub m_rq: Matrix,
    pub grad_bq: Matrix,
    pub grad_bk: Matrix,
    pub eta_q: f64,
    pub eta_k: f64,
    /// Alternations actually run by [`decode_compress`].
    pub iterations: usize,
}

impl DecodeWorkspace {
    pub fn new(rank: usize, dim: usize) -> Self {
        Self {
            m_lq: Matrix::zeros(1, rank),
            m_rq: Matrix::zeros(rank, rank),
            grad_bq: Matrix::zeros(rank, dim),
            grad_bk: Matrix::zeros(rank, dim),
            eta_q: 0.0,
            eta_k: 0.0,
            iterations: 0,
        }
    }
}

fn check_row(m: &Matrix, cols: usize, what: &'static str) -> Result<()> {
    if m.shape() != (1, cols) {
        return Err(LrqkError::shape(
            what,
            format!("expected 1x{cols}, got {:?}", m.shape()),
        ));
    }
    Ok(())
}

fn check_step(step: &TokenStep, proj: &Projections) -> Result<()> {
    let d = proj.dim();
    check_row(&step.q, d, "q_t")?;
    check_row(&step.k, d, "k_t")?;
    check_row(&step.v, d, "v_t")
}

fn check_resident(proj: &Projections, a_k_res: &Matrix, k_res: &Matrix) -> Result<()> {
    if a_k_res.rows() != k_res.rows() || a_k_res.cols() != proj.rank() || k_res.cols() != proj.dim()
    {
        return Err(LrqkError::shape(
            "resident set",
            format!(
                "A_K rows {:?}, K rows {:?}, rank {}, dim {}",
                a_k_res.shape(),
                k_res.shape(),
                proj.rank(),
                proj.dim()
            ),
        ));
    }
    Ok(())
}

/// `k̂ = (k Bᵀ)(B Bᵀ)⁻¹`, the least-squares fit of `k` in the row space of `B_K`.
pub fn khat_initial_guess(k_t: &Matrix, b_k: &Matrix) -> Result<Matrix> {
    check_row(k_t, b_k.cols(), "k_t")?;
    solve_spd(&b_k.matmul_t(b_k)?, &k_t.matmul_t(b_k)?)
}

/// Closed-form `q̂` given the current `k̂`; fills `ws.m_lq` and `ws.m_rq`.
pub fn update_qhat(
    step: &TokenStep,
    k_hat: &Matrix,
    proj: &Projections,
    a_k_res: &Matrix,
    k_res: &Matrix,
    cfg: &DecodeConfig,
    ws: &mut DecodeWorkspace,
) -> Result<Matrix> {
    check_step(step, proj)?;
    check_row(k_hat, proj.rank(), "k_hat")?;
    check_resident(proj, a_k_res, k_res)?;

    let qk = dot(step.q.as_slice(), step.k.as_slice());
    let mut m_lq = step.q.matmul_t(&proj.b_q)?;
    m_lq.add_scaled(cfg.lambda_d1 * qk, k_hat)?;
    let resident_logits = step.q.matmul_t(k_res)?; // 1 × |Ω|
    m_lq.add_scaled(cfg.lambda_d2, &resident_logits.matmul(a_k_res)?)?;

    let mut m_rq = proj.b_q.matmul_t(&proj.b_q)?;
    m_rq.add_scaled(cfg.lambda_d1, &gram(k_hat))?;
    m_rq.add_scaled(cfg.lambda_d2, &gram(a_k_res))?;

    let q_hat = solve_spd(&m_rq, &m_lq)?;
    ws.m_lq = m_lq;
    ws.m_rq = m_rq;
    Ok(q_hat)
}

/// Closed-form `k̂` given the current `q̂`.
pub fn update_khat(
    step: &TokenStep,
    q_hat: &Matrix,
    proj: &Projections,
    cfg: &DecodeConfig,
) -> Result<Matrix> {
    check_step(step, proj)?;
    check_row(q_hat, proj.rank(), "q_hat")?;
    let qk = dot(step.q.as_slice(), step.k.as_slice());
    let mut rhs = step.k.matmul_t(&proj.b_k)?;
    rhs.add_scaled(cfg.lambda_d1 * qk, q_hat)?;
    let mut system = proj.b_k.matmul_t(&proj.b_k)?;
    system.add_scaled(cfg.lambda_d1, &gram(q_hat))?;
    solve_spd(&system, &rhs)
}

/// Evaluates the decode objective at `(q̂, k̂)`.
pub fn decode_objective(
    step: &TokenStep,
    comp: &CompressedToken,
    proj: &Projections,
    a_k_res: &Matrix,
    k_res: &Matrix,
    cfg: &DecodeConfig,
) -> Result<f64> {
    check_step(step, proj)?;
    check_resident(proj, a_k_res, k_res)?;
    let q_term = fro_norm_sq(&comp.q_hat.matmul(&proj.b_q)?.sub(&step.q)?);
    let k_term = fro_norm_sq(&comp.k_hat.matmul(&proj.b_k)?.sub(&step.k)?);
    let pair = dot(comp.q_hat.as_slice(), comp.k_hat.as_slice())
        - dot(step.q.as_slice(), step.k.as_slice());
    let resident = fro_norm_sq(
        &comp
            .q_hat
            .matmul_t(a_k_res)?
            .sub(&step.q.matmul_t(k_res)?)?,
    );
    Ok(0.5 * (q_term + k_term + cfg.lambda_d1 * pair * pair + cfg.lambda_d2 * resident))
}

fn mean_sq_change(a: &Matrix, b: &Matrix, c: &Matrix, d: &Matrix) -> f64 {
    let n = (a.as_slice().len() + c.as_slice().len()).max(1) as f64;
    let s: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .chain(c.as_slice().iter().zip(d.as_slice()))
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    s / n
}

/// Initial `k̂` guess, then alternating `q̂`/`k̂` updates until the mean
/// squared change of `(q̂, k̂)` drops to `tol` or `max_iter` is reached.
/// `q̂` starts from zero.
pub fn decode_compress(
    step: &TokenStep,
    proj: &Projections,
    a_k_res: &Matrix,
    k_res: &Matrix,
    cfg: &DecodeConfig,
) -> Result<(CompressedToken, DecodeWorkspace)> {
    cfg.validate()?;
    check_step(step, proj)?;
    check_resident(proj, a_k_res, k_res)?;
    let r = proj.rank();
    let mut ws = DecodeWorkspace::new(r, proj.dim());
    let mut k_hat = khat_initial_guess(&step.k, &proj.b_k)?;
    let mut q_hat = Matrix::zeros(1, r);
    for it in 0..cfg.max_iter {
        let new_q = update_qhat(step, &k_hat, proj, a_k_res, k_res, cfg, &mut ws)?;
        let new_k = update_khat(step, &new_q, proj, cfg)?;
        let change = mean_sq_change(&new_q, &q_hat, &new_k, &k_hat);
        q_hat = new_q;
        k_hat = new_k;
        ws.iterations = it + 1;
        if change <= cfg.tol {
            break;
        }
    }
    Ok((CompressedToken { q_hat, k_hat }, ws))
}

/// Exact minimizer of `½‖resid − η·dir‖²` over `η`; zero when `dir`
/// vanishes relative to the numerator.
pub fn exact_step_size(resid: &[f64], dir: &[f64]) -> f64 {
    let num = dot(resid, dir);
    let den = dot(dir, dir);
    if den <= ETA_DENOM_FLOOR * (1.0 + num.abs()) {
        0.0
    } else {
        num / den
    }
}

/// One line-searched gradient step on `B` for the residual `x̂ B − x`.
/// Returns `(gradient, step size)` and updates `b` in place.
fn projection_step(x_hat: &Matrix, x: &Matrix, b: &mut Matrix) -> Result<(Matrix, f64)> {
    let resid = x_hat.matmul(b)?.sub(x)?; // 1 × d
    let grad = x_hat.t_matmul(&resid)?; // r × d, rank one
    let dir = x_hat.matmul(&grad)?; // 1 × d
    let eta = exact_step_size(resid.as_slice(), dir.as_slice());
    if eta != 0.0 {
        b.add_scaled(-eta, &grad)?;
    }
    Ok((grad, eta))
}

/// Gradient step with exact line search on both projections.
pub fn update_projections(
    step: &TokenStep,
    comp: &CompressedToken,
    proj: &mut Projections,
    ws: &mut DecodeWorkspace,
) -> Result<()> {
    check_step(step, proj)?;
    check_row(&comp.q_hat, proj.rank(), "q_hat")?;
    check_row(&comp.k_hat, proj.rank(), "k_hat")?;
    let (grad_bq, eta_q) = projection_step(&comp.q_hat, &step.q, &mut proj.b_q)?;
    let (grad_bk, eta_k) = projection_step(&comp.k_hat, &step.k, &mut proj.b_k)?;
    if !proj.b_q.all_finite() || !proj.b_k.all_finite() {
        return Err(LrqkError::NonFinite("update_projections"));
    }
    ws.grad_bq = grad_bq;
    ws.grad_bk = grad_bk;
    ws.eta_q = eta_q;
    ws.eta_k = eta_k;
    Ok(())
}
