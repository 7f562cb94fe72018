//! Cholesky factorization with diagonal regularization for near-singular
//! Gram matrices.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const SYMMETRY_TOL: f64 = 1e-8;

/// Lower-triangular `L` with `L * L^T = m + j * I`, where `j` is the first
/// jitter that yields positive pivots.
///
/// The requested `jitter` is tried first. If a pivot goes non-positive the
/// routine falls back to a ladder starting at `1e-6 * trace(m) / dim` and
/// escalating tenfold up to three times before giving up. Activation Gram
/// matrices are positive semidefinite up to rounding, so in practice the
/// requested jitter succeeds and the result is exact for `m + jitter * I`.
pub fn cholesky_lower(m: &Matrix, jitter: f64) -> Result<Matrix> {
    let (r, c) = m.shape();
    if r != c {
        return Err(Error::invalid(format!("cholesky needs a square matrix, got {r}x{c}")));
    }
    if !(jitter >= 0.0) {
        return Err(Error::invalid(format!("jitter must be non-negative, got {jitter}")));
    }
    let scale = m.max_abs().max(1.0);
    for i in 0..r {
        for j in 0..i {
            if (m.get(i, j) - m.get(j, i)).abs() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!(
                    "matrix is not symmetric at ({i}, {j}): {} vs {}",
                    m.get(i, j),
                    m.get(j, i)
                )));
            }
        }
    }

    let trace: f64 = (0..r).map(|i| m.get(i, i)).sum();
    let base = if trace > 0.0 { 1e-6 * trace / r as f64 } else { 1e-6 };
    let mut attempts = vec![jitter];
    for t in 0..=3 {
        let j = base * 10f64.powi(t);
        if j > jitter {
            attempts.push(j);
        }
    }

    let mut last_pivot = f64::NAN;
    for &j in &attempts {
        match try_factor(m, j) {
            Ok(l) => return Ok(l),
            Err(pivot) => last_pivot = pivot,
        }
    }
    Err(Error::numerical(format!(
        "cholesky failed for all jitters up to {:e} (last pivot {last_pivot:e})",
        attempts.last().unwrap()
    )))
}

/// One factorization attempt; returns the offending pivot on failure.
fn try_factor(m: &Matrix, jitter: f64) -> std::result::Result<Matrix, f64> {
    let n = m.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = m.get(i, j);
            if i == j {
                sum += jitter;
            }
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(sum);
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}
