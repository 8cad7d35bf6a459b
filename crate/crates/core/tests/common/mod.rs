//! Independent reference computations shared by the integration tests.
//! Everything here works on explicit dense products and never calls the
//! library's solvers.

#![allow(dead_code, clippy::too_many_arguments)]

use std::collections::BTreeSet;

use lrqk::decode::{CompressedToken, DecodeConfig, TokenStep};
use lrqk::matrix::Matrix;
use lrqk::prefill::{LowRankFactors, PrefillConfig, PrefillInput, Projections};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn norm(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn sq(m: &Matrix) -> f64 {
    m.as_slice().iter().map(|x| x * x).sum()
}

/// Plain triple-loop `A · B`.
pub fn mm(a: &Matrix, b: &Matrix) -> Matrix {
    assert_eq!(a.cols(), b.rows());
    let mut out = vec![0.0; a.rows() * b.cols()];
    for i in 0..a.rows() {
        for p in 0..a.cols() {
            let x = a[(i, p)];
            for j in 0..b.cols() {
                out[i * b.cols() + j] += x * b[(p, j)];
            }
        }
    }
    Matrix::new(a.rows(), b.cols(), out).unwrap()
}

pub fn t(a: &Matrix) -> Matrix {
    a.transpose()
}

pub fn sub(a: &Matrix, b: &Matrix) -> Matrix {
    a.sub(b).unwrap()
}

pub fn lin(terms: &[(f64, &Matrix)]) -> Matrix {
    let (rows, cols) = terms[0].1.shape();
    let mut out = vec![0.0; rows * cols];
    for (c, m) in terms {
        assert_eq!(m.shape(), (rows, cols));
        for (o, x) in out.iter_mut().zip(m.as_slice()) {
            *o += c * x;
        }
    }
    Matrix::new(rows, cols, out).unwrap()
}

/// Prefill objective with the `l × l` logit matrix formed explicitly.
pub fn prefill_objective(q: &Matrix, k: &Matrix, f: &LowRankFactors, cfg: &PrefillConfig) -> f64 {
    let logits = sub(&mm(q, &t(k)), &mm(&f.a_q, &t(&f.a_k)));
    let q_res = sub(q, &mm(&f.a_q, &f.b_q));
    let k_res = sub(k, &mm(&f.a_k, &f.b_k));
    0.5 * sq(&logits) + 0.5 * cfg.lambda_pq * sq(&q_res) + 0.5 * cfg.lambda_pk * sq(&k_res)
}

/// Gradients of the prefill objective, each paired with a scale: the
/// largest Frobenius norm among the terms that make it up.
pub struct PrefillGrads {
    pub a_q: (Matrix, f64),
    pub a_k: (Matrix, f64),
    pub b_q: (Matrix, f64),
    pub b_k: (Matrix, f64),
}

pub fn prefill_grads(
    q: &Matrix,
    k: &Matrix,
    f: &LowRankFactors,
    cfg: &PrefillConfig,
) -> PrefillGrads {
    let (lq, lk) = (cfg.lambda_pq, cfg.lambda_pk);
    let qkt = mm(q, &t(k));
    let approx = mm(&f.a_q, &t(&f.a_k));
    let e = sub(&qkt, &approx); // l × l
    let e_q = sub(&mm(&f.a_q, &f.b_q), q);
    let e_k = sub(&mm(&f.a_k, &f.b_k), k);

    let scale = |ms: &[&Matrix]| ms.iter().map(|m| norm(m)).fold(0.0, f64::max);

    // ∂/∂A_Q = −E A_K + λ_pQ (A_Q B_Q − Q) B_Qᵀ
    let aq_terms = [
        mm(&qkt, &f.a_k),
        mm(&approx, &f.a_k),
        mm(&f.a_q, &mm(&f.b_q, &t(&f.b_q))),
        mm(q, &t(&f.b_q)),
    ];
    let g_aq = lin(&[(-1.0, &mm(&e, &f.a_k)), (lq, &mm(&e_q, &t(&f.b_q)))]);
    // ∂/∂A_K = −Eᵀ A_Q + λ_pK (A_K B_K − K) B_Kᵀ
    let ak_terms = [
        mm(&t(&qkt), &f.a_q),
        mm(&t(&approx), &f.a_q),
        mm(&f.a_k, &mm(&f.b_k, &t(&f.b_k))),
        mm(k, &t(&f.b_k)),
    ];
    let g_ak = lin(&[(-1.0, &mm(&t(&e), &f.a_q)), (lk, &mm(&e_k, &t(&f.b_k)))]);
    // ∂/∂B = λ Aᵀ (A B − X)
    let g_bq = mm(&t(&f.a_q), &e_q).scale(lq);
    let g_bk = mm(&t(&f.a_k), &e_k).scale(lk);
    let bq_scale = lq * scale(&[&mm(&t(&f.a_q), &mm(&f.a_q, &f.b_q)), &mm(&t(&f.a_q), q)]);
    let bk_scale = lk * scale(&[&mm(&t(&f.a_k), &mm(&f.a_k, &f.b_k)), &mm(&t(&f.a_k), k)]);
    PrefillGrads {
        a_q: (g_aq, scale(&aq_terms.iter().collect::<Vec<_>>())),
        a_k: (g_ak, scale(&ak_terms.iter().collect::<Vec<_>>())),
        b_q: (g_bq, bq_scale),
        b_k: (g_bk, bk_scale),
    }
}

/// Decode objective evaluated from its definition.
pub fn decode_objective_direct(
    step: &TokenStep,
    q_hat: &Matrix,
    k_hat: &Matrix,
    b_q: &Matrix,
    b_k: &Matrix,
    a_res: &Matrix,
    k_res: &Matrix,
    cfg: &DecodeConfig,
) -> f64 {
    let q_term = sq(&sub(&mm(q_hat, b_q), &step.q));
    let k_term = sq(&sub(&mm(k_hat, b_k), &step.k));
    let pair = mm(q_hat, &t(k_hat))[(0, 0)] - mm(&step.q, &t(&step.k))[(0, 0)];
    let resident = sq(&sub(&mm(q_hat, &t(a_res)), &mm(&step.q, &t(k_res))));
    0.5 * (q_term + k_term + cfg.lambda_d1 * pair * pair + cfg.lambda_d2 * resident)
}

pub struct DecodeGrads {
    pub q_hat: (Matrix, f64),
    pub k_hat: (Matrix, f64),
    pub b_q: Matrix,
    pub b_k: Matrix,
}

pub fn decode_grads(
    step: &TokenStep,
    comp: &CompressedToken,
    proj: &Projections,
    a_res: &Matrix,
    k_res: &Matrix,
    cfg: &DecodeConfig,
) -> DecodeGrads {
    let (qh, kh) = (&comp.q_hat, &comp.k_hat);
    let qk = mm(&step.q, &t(&step.k))[(0, 0)];
    let pair = mm(qh, &t(kh))[(0, 0)] - qk;
    let e_q = sub(&mm(qh, &proj.b_q), &step.q);
    let e_k = sub(&mm(kh, &proj.b_k), &step.k);
    let e_res = sub(&mm(qh, &t(a_res)), &mm(&step.q, &t(k_res)));

    let g_qh = lin(&[
        (1.0, &mm(&e_q, &t(&proj.b_q))),
        (cfg.lambda_d1 * pair, kh),
        (cfg.lambda_d2, &mm(&e_res, a_res)),
    ]);
    let qh_scale = [
        norm(&mm(qh, &mm(&proj.b_q, &t(&proj.b_q)))),
        norm(&mm(&step.q, &t(&proj.b_q))),
        cfg.lambda_d1 * qk.abs().max(mm(qh, &t(kh))[(0, 0)].abs()) * norm(kh),
        cfg.lambda_d2 * norm(&mm(&mm(qh, &t(a_res)), a_res)),
        cfg.lambda_d2 * norm(&mm(&mm(&step.q, &t(k_res)), a_res)),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    let g_kh = lin(&[(1.0, &mm(&e_k, &t(&proj.b_k))), (cfg.lambda_d1 * pair, qh)]);
    let kh_scale = [
        norm(&mm(kh, &mm(&proj.b_k, &t(&proj.b_k)))),
        norm(&mm(&step.k, &t(&proj.b_k))),
        cfg.lambda_d1 * qk.abs().max(mm(qh, &t(kh))[(0, 0)].abs()) * norm(qh),
    ]
    .into_iter()
    .fold(0.0, f64::max);

    DecodeGrads {
        q_hat: (g_qh, qh_scale),
        k_hat: (g_kh, kh_scale),
        b_q: mm(&t(qh), &e_q),
        b_k: mm(&t(kh), &e_k),
    }
}

/// Central differences of `f` at `x`, one entry at a time.
pub fn central_diff(x: &Matrix, h: f64, f: impl Fn(&Matrix) -> f64) -> Matrix {
    let (rows, cols) = x.shape();
    let mut out = vec![0.0; rows * cols];
    let base = x.as_slice().to_vec();
    for (i, o) in out.iter_mut().enumerate() {
        let mut plus = base.clone();
        let mut minus = base.clone();
        plus[i] += h;
        minus[i] -= h;
        let fp = f(&Matrix::new(rows, cols, plus).unwrap());
        let fm = f(&Matrix::new(rows, cols, minus).unwrap());
        *o = (fp - fm) / (2.0 * h);
    }
    Matrix::new(rows, cols, out).unwrap()
}

/// Replays the fast tier from scratch: it starts as `initial`, each step
/// adds the new token and then becomes that step's selection. Returns the
/// per-step miss counts.
pub fn replay_misses(initial: &[usize], steps: &[(usize, Vec<usize>)]) -> Vec<usize> {
    let mut fast: BTreeSet<usize> = initial.iter().copied().collect();
    let mut out = Vec::with_capacity(steps.len());
    for (token, omega) in steps {
        fast.insert(*token);
        let selected: BTreeSet<usize> = omega.iter().copied().collect();
        out.push(selected.difference(&fast).count());
        fast = selected;
    }
    out
}

/// Softmax attention written out directly, for comparison.
pub fn naive_attention(q: &[f64], keys: &[&[f64]], values: &[&[f64]]) -> Vec<f64> {
    let d = q.len();
    let logits: Vec<f64> = keys
        .iter()
        .map(|k| q.iter().zip(*k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt())
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|x| (x - max).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut out = vec![0.0; values[0].len()];
    for (wi, v) in w.iter().zip(values) {
        for (o, x) in out.iter_mut().zip(*v) {
            *o += wi / z * x;
        }
    }
    out
}

pub fn input(q: Matrix, k: Matrix) -> PrefillInput {
    PrefillInput::new(q, k).unwrap()
}
