use std::io::Write;

use crate::error::{LrqkError, Result};
use crate::matrix::{dot, Matrix};
use crate::oracle::softmax;

const JACOBI_MAX_SWEEPS: usize = 80;

/// Singular values in non-increasing order, `min(rows, cols)` of them,
/// by one-sided Jacobi rotations on the columns of the narrower orientation.
pub fn singular_spectrum(m: &Matrix) -> Vec<f64> {
    let a = if m.cols() > m.rows() {
        m.transpose()
    } else {
        m.clone()
    };
    let (rows, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (left, right) = cols.split_at_mut(q);
                let (cp, cq) = (&mut left[p], &mut right[0]);
                for i in 0..rows {
                    let (x, y) = (cp[i], cq[i]);
                    cp[i] = c * x - s * y;
                    cq[i] = s * x + c * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }

    let mut sigmas: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    sigmas.sort_by(|a, b| b.total_cmp(a));
    sigmas
}

/// Mean causal attention mass on the trailing `window` keys, averaged over
/// every step `t ≥ window − 1`. Entry `window − 1` is the current token
/// (offset 0); entry 0 is offset `−(window − 1)`.
pub fn neighbor_attention_profile(q: &Matrix, k: &Matrix, window: usize) -> Result<Vec<f64>> {
    if q.shape() != k.shape() {
        return Err(LrqkError::shape(
            "neighbor_attention_profile",
            format!("Q {:?}, K {:?}", q.shape(), k.shape()),
        ));
    }
    let l = q.rows();
    if window == 0 {
        return Err(LrqkError::InvalidConfig("window must be at least 1".into()));
    }
    if window > l {
        return Err(LrqkError::WindowTooLarge { window, len: l });
    }
    let scale = 1.0 / (q.cols() as f64).sqrt();
    let mut profile = vec![0.0; window];
    for t in window - 1..l {
        let q_t = q.row(t);
        let logits: Vec<f64> = (0..=t).map(|j| dot(q_t, k.row(j)) * scale).collect();
        let weights = softmax(&logits);
        for (acc, w) in profile.iter_mut().zip(&weights[t + 1 - window..]) {
            *acc += w;
        }
    }
    let steps = (l - window + 1) as f64;
    for p in &mut profile {
        *p /= steps;
    }
    Ok(profile)
}

/// `index,sigma`
pub fn write_spectrum_csv<W: Write>(out: W, sigmas: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "sigma"])?;
    for (i, s) in sigmas.iter().enumerate() {
        w.write_record([i.to_string(), s.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `offset,weight`, offsets running from `−(window − 1)` up to 0.
pub fn write_profile_csv<W: Write>(out: W, profile: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["offset", "weight"])?;
    let last = profile.len() as i64 - 1;
    for (i, p) in profile.iter().enumerate() {
        w.write_record([(i as i64 - last).to_string(), p.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
