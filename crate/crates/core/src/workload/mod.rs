//! Synthetic per-head Q/K/V streams, trace files and activation statistics.

mod stats;
mod trace;

pub use stats::{
    neighbor_attention_profile, singular_spectrum, write_profile_csv, write_spectrum_csv,
};
pub use trace::{
    group_heads, heads_to_tensors, load_trace, read_trace, save_trace, write_trace, HeadTensors,
    TensorRole, TraceManifest, TraceTensor, TRACE_MAGIC, TRACE_VERSION,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decode::TokenStep;
use crate::error::{LrqkError, Result};
use crate::matrix::{dot, Matrix};
use crate::prefill::PrefillInput;

/// How many later queries leave a trace on each key in the recency-biased
/// generator. `e^-16` is far below any visible weight.
const RECENCY_HORIZON: usize = 16;

/// Parameters of a synthetic head.
///
/// `Q` and `K` are each `amplitude · U diag(σ) Wᵀ` with `σ_i = decay^i` for
/// `i < r_true`, `U` (`l × r_true`) and `W` (`d × r_true`) random with
/// orthonormal columns. `V` is standard normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub l: usize,
    pub d: usize,
    pub r_true: usize,
    pub decay: f64,
    pub recency_strength: f64,
    pub seed: u64,
    pub amplitude: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            l: 1024,
            d: 64,
            r_true: 16,
            decay: 0.9,
            recency_strength: 0.0,
            seed: 0,
            amplitude: 1.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.l == 0 || self.d == 0 {
            return Err(LrqkError::InvalidConfig(
                "sequence length and head dim must be positive".into(),
            ));
        }
        if self.r_true == 0 || self.r_true > self.d || self.r_true > self.l {
            return Err(LrqkError::InvalidConfig(format!(
                "effective rank {} must lie in 1..=min(l={}, d={})",
                self.r_true, self.l, self.d
            )));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(LrqkError::InvalidConfig("decay must lie in (0, 1]".into()));
        }
        if !(self.recency_strength.is_finite() && self.recency_strength >= 0.0) {
            return Err(LrqkError::InvalidConfig(
                "recency strength must be >= 0".into(),
            ));
        }
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(LrqkError::InvalidConfig(
                "amplitude must be positive".into(),
            ));
        }
        Ok(())
    }

    /// The prescribed singular values of `Q` and `K`.
    pub fn sigmas(&self) -> Vec<f64> {
        (0..self.r_true)
            .map(|i| self.amplitude * self.decay.powi(i as i32))
            .collect()
    }
}

/// Full `l × d` Q/K/V matrices of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct Workload {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl Workload {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        if q.shape() != k.shape() || q.shape() != v.shape() {
            return Err(LrqkError::shape(
                "Workload",
                format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
            ));
        }
        Ok(Self { q, k, v })
    }

    pub fn len(&self) -> usize {
        self.q.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.q.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.q.cols()
    }

    /// Splits into the first `prompt_len` rows (the prompt) and the rest
    /// (the decode stream).
    pub fn split(&self, prompt_len: usize) -> Result<(PrefillInput, Matrix, Vec<TokenStep>)> {
        if prompt_len == 0 || prompt_len > self.len() {
            return Err(LrqkError::InvalidConfig(format!(
                "prompt length {prompt_len} must lie in 1..={}",
                self.len()
            )));
        }
        let input = PrefillInput::new(
            self.q.slice_rows(0, prompt_len),
            self.k.slice_rows(0, prompt_len),
        )?;
        let v = self.v.slice_rows(0, prompt_len);
        let steps = (prompt_len..self.len())
            .map(|i| TokenStep::new(self.q.row(i), self.k.row(i), self.v.row(i)))
            .collect::<Result<Vec<_>>>()?;
        Ok((input, v, steps))
    }

    pub fn into_prefill_input(self) -> Result<(PrefillInput, Matrix)> {
        Ok((PrefillInput::new(self.q, self.k)?, self.v))
    }
}

fn gaussian_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..cols)
        .map(|_| (0..rows).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// Orthonormalizes columns in place with two passes of modified Gram-Schmidt.
fn orthonormalize(cols: &mut [Vec<f64>]) {
    for j in 0..cols.len() {
        for _pass in 0..2 {
            for p in 0..j {
                let (done, rest) = cols.split_at_mut(j);
                let proj = dot(&done[p], &rest[0]);
                for (x, b) in rest[0].iter_mut().zip(&done[p]) {
                    *x -= proj * b;
                }
            }
        }
        let norm = dot(&cols[j], &cols[j]).sqrt();
        for x in &mut cols[j] {
            *x /= norm;
        }
    }
}

fn random_orthonormal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut c = gaussian_columns(rows, cols, rng);
    orthonormalize(&mut c);
    c
}

/// `Σ_i σ_i u_i w_iᵀ` as an `l × d` matrix.
fn spectral_product(u: &[Vec<f64>], sigmas: &[f64], w: &[Vec<f64>], l: usize, d: usize) -> Matrix {
    let mut out = Matrix::zeros(l, d);
    for ((ui, &s), wi) in u.iter().zip(sigmas).zip(w) {
        for (i, &u) in ui.iter().enumerate().take(l) {
            let a = s * u;
            for (o, &b) in out.row_mut(i).iter_mut().zip(wi) {
                *o += a * b;
            }
        }
    }
    out
}

/// Q and K of numerical rank exactly `r_true` with singular values
/// `amplitude · decay^i`, plus a standard normal V.
pub fn gen_lowrank_qk(spec: &SyntheticSpec) -> Result<Workload> {
    spec.validate()?;
    let (l, d, r) = (spec.l, spec.d, spec.r_true);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let sigmas = spec.sigmas();
    let u_q = random_orthonormal(l, r, &mut rng);
    let w_q = random_orthonormal(d, r, &mut rng);
    let u_k = random_orthonormal(l, r, &mut rng);
    let w_k = random_orthonormal(d, r, &mut rng);
    let q = spectral_product(&u_q, &sigmas, &w_q, l, d);
    let k = spectral_product(&u_k, &sigmas, &w_k, l, d);
    let v_data = (0..l * d)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Workload::new(q, k, Matrix::new(l, d, v_data)?)
}

/// [`gen_lowrank_qk`] with each key nudged toward the queries that follow
/// it: `k_i += s·√d·Σ_{t≥i} e^{-(t-i)} q_t / ‖q_t‖²`, so the scaled logit of
/// `q_t` against `k_i` gains `s·e^{-(t-i)}` from its own term. With zero
/// strength the output is exactly the low-rank workload.
pub fn gen_recency_biased(spec: &SyntheticSpec) -> Result<Workload> {
    let mut w = gen_lowrank_qk(spec)?;
    if spec.recency_strength == 0.0 {
        return Ok(w);
    }
    let (l, d) = (spec.l, spec.d);
    let gain = spec.recency_strength * (d as f64).sqrt();
    let inv_norms: Vec<f64> =
        w.q.row_iter()
            .map(|q| {
                let n = dot(q, q);
                if n > 0.0 {
                    1.0 / n
                } else {
                    0.0
                }
            })
            .collect();
    let mut k = w.k.clone();
    for i in 0..l {
        let end = (i + RECENCY_HORIZON).min(l - 1);
        for (t, &inv) in inv_norms.iter().enumerate().take(end + 1).skip(i) {
            let c = gain * (-((t - i) as f64)).exp() * inv;
            let q_t = w.q.row(t);
            for (x, &qv) in k.row_mut(i).iter_mut().zip(q_t) {
                *x += c * qv;
            }
        }
    }
    w.k = k;
    Ok(w)
}
