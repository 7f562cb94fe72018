//! Singular value decomposition via one-sided (Hestenes) Jacobi rotations.
//!
//! Jacobi is slower than bidiagonalization methods but has two properties
//! this toolkit needs: high relative accuracy on small singular values, and
//! a completely deterministic, platform-independent execution order. The
//! routine is intentionally sequential; callers parallelize across layers
//! and trials instead.
//!
//! Output convention: singular values are sorted in descending order (ties
//! keep the lower original index first), and each left singular vector is
//! oriented so its largest-magnitude entry is positive, ties resolved by
//! the smallest row index. This makes factor matrices unique and therefore
//! byte-stable across runs.

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Economy-size factors: `u` is m x p, `singular` has p entries, `vt` is
/// p x n, with p = min(m, n).
#[derive(Debug, Clone)]
pub struct SvdFactors {
    pub u: Matrix,
    pub singular: Vec<f64>,
    pub vt: Matrix,
}

const MAX_SWEEPS: usize = 60;
const ORTH_TOL: f64 = 1e-14;

/// Economy SVD of `w`.
pub fn svd(w: &Matrix) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    if m >= n {
        jacobi_tall(w)
    } else {
        // Work on the transpose and swap the roles of U and V.
        let f = jacobi_tall(&w.transpose())?;
        let mut out = SvdFactors {
            u: f.vt.transpose(),
            singular: f.singular,
            vt: f.u.transpose(),
        };
        fix_signs(&mut out);
        Ok(out)
    }
}

/// First `k` singular triplets of `w`.
pub fn truncated_svd(w: &Matrix, k: usize) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    let p = m.min(n);
    if k == 0 || k > p {
        return Err(Error::invalid(format!(
            "rank {k} is outside [1, {p}] for a {m}x{n} matrix"
        )));
    }
    let f = svd(w)?;
    let u = Matrix::from_fn(m, k, |i, j| f.u.get(i, j));
    let vt = Matrix::from_fn(k, n, |i, j| f.vt.get(i, j));
    Ok(SvdFactors { u, singular: f.singular[..k].to_vec(), vt })
}

/// Full spectrum of `w`, descending.
pub fn singular_values(w: &Matrix) -> Result<Vec<f64>> {
    Ok(svd(w)?.singular)
}

/// One-sided Jacobi on an m x n matrix with m >= n: orthogonalize columns
/// by plane rotations, accumulating them into V.
fn jacobi_tall(w: &Matrix) -> Result<SvdFactors> {
    let (m, n) = w.shape();
    debug_assert!(m >= n);
    let mut a = w.clone();
    let mut v = Matrix::identity(n);

    let mut converged = false;
    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    let ap = a.get(i, p);
                    let aq = a.get(i, q);
                    alpha += ap * ap;
                    beta += aq * aq;
                    gamma += ap * aq;
                }
                if alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                if gamma.abs() <= ORTH_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut a, p, q, c, s);
                rotate_columns(&mut v, p, q, c, s);
                rotated = true;
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::numerical(format!(
            "svd did not converge within {MAX_SWEEPS} sweeps on a {m}x{n} matrix"
        )));
    }

    // Column norms are the singular values; normalized columns form U.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|i| a.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].total_cmp(&norms[x]).then(x.cmp(&y)));

    let sigma_max = norms.iter().cloned().fold(0.0_f64, f64::max);
    let zero_cut = sigma_max * 1e-14;

    let mut u = Matrix::zeros(m, n);
    let mut singular = vec![0.0; n];
    let mut vt = Matrix::zeros(n, n);
    let mut degenerate = Vec::new();
    for (dst, &src) in order.iter().enumerate() {
        singular[dst] = norms[src];
        for i in 0..n {
            vt.set(dst, i, v.get(i, src));
        }
        if norms[src] > zero_cut && norms[src] > 0.0 {
            for i in 0..m {
                u.set(i, dst, a.get(i, src) / norms[src]);
            }
        } else {
            degenerate.push(dst);
        }
    }
    complete_columns(&mut u, &degenerate)?;

    let mut out = SvdFactors { u, singular, vt };
    fix_signs(&mut out);
    Ok(out)
}

fn rotate_columns(a: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    for i in 0..a.rows() {
        let ap = a.get(i, p);
        let aq = a.get(i, q);
        a.set(i, p, c * ap - s * aq);
        a.set(i, q, s * ap + c * aq);
    }
}

/// Fill the listed (numerically zero) columns of `u` with vectors
/// orthonormal to all others, built by Gram-Schmidt over the standard
/// basis in index order. Deterministic by construction.
fn complete_columns(u: &mut Matrix, degenerate: &[usize]) -> Result<()> {
    let (m, n) = u.shape();
    let mut filled: Vec<bool> = (0..n).map(|j| !degenerate.contains(&j)).collect();
    let mut next_basis = 0;
    for &j in degenerate {
        let mut found = false;
        while next_basis < m {
            let mut cand = vec![0.0; m];
            cand[next_basis] = 1.0;
            next_basis += 1;
            for other in 0..n {
                if !filled[other] {
                    continue;
                }
                let dot: f64 = (0..m).map(|i| cand[i] * u.get(i, other)).sum();
                for (i, c) in cand.iter_mut().enumerate() {
                    *c -= dot * u.get(i, other);
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (i, c) in cand.iter().enumerate() {
                    u.set(i, j, c / norm);
                }
                filled[j] = true;
                found = true;
                break;
            }
        }
        if !found {
            return Err(Error::numerical(
                "could not complete an orthonormal basis for zero singular values",
            ));
        }
    }
    Ok(())
}

/// Orient each left singular vector so its largest-magnitude entry is
/// positive, compensating in the matching right vector.
fn fix_signs(f: &mut SvdFactors) {
    let (m, p) = f.u.shape();
    let n = f.vt.cols();
    for j in 0..p {
        let mut best = 0.0_f64;
        let mut best_i = 0;
        for i in 0..m {
            let a = f.u.get(i, j).abs();
            if a > best {
                best = a;
                best_i = i;
            }
        }
        if f.u.get(best_i, j) < 0.0 {
            for i in 0..m {
                f.u.set(i, j, -f.u.get(i, j));
            }
            for i in 0..n {
                f.vt.set(j, i, -f.vt.get(j, i));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(f: &SvdFactors) -> Matrix {
        f.u.mul_diag_right(&f.singular).matmul(&f.vt)
    }

    #[test]
    fn known_two_by_two_spectrum() {
        // W^T W has eigenvalues 45 and 5.
        let w = Matrix::from_vec(2, 2, vec![3.0, 0.0, 4.0, 5.0]).unwrap();
        let s = singular_values(&w).unwrap();
        assert!((s[0] - 45.0_f64.sqrt()).abs() < 1e-12);
        assert!((s[1] - 5.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn diagonal_matrix_is_its_own_decomposition() {
        let w = Matrix::from_diag(&[5.0, 3.0, 1.0]);
        let f = svd(&w).unwrap();
        assert_eq!(f.singular, vec![5.0, 3.0, 1.0]);
        assert!(reconstruct(&f).max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn wide_matrix_reconstructs() {
        let w = Matrix::from_fn(3, 7, |i, j| ((i * 7 + j) as f64 * 0.37).sin());
        let f = svd(&w).unwrap();
        assert_eq!(f.u.shape(), (3, 3));
        assert_eq!(f.vt.shape(), (3, 7));
        assert!(reconstruct(&f).max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn rank_deficient_input_keeps_orthonormal_u() {
        // Outer product of two vectors: rank 1 in a 6x4 shape.
        let a = Matrix::from_fn(6, 1, |i, _| (i as f64 + 1.0) * 0.3);
        let b = Matrix::from_fn(1, 4, |_, j| (j as f64 - 1.5) * 0.8);
        let w = a.matmul(&b);
        let f = svd(&w).unwrap();
        assert!(f.singular[1].abs() < 1e-10 * f.singular[0]);
        let gram = f.u.transpose().matmul(&f.u);
        assert!(gram.max_abs_diff(&Matrix::identity(4)) < 1e-10);
        assert!(reconstruct(&f).max_abs_diff(&w) < 1e-10 * f.singular[0].max(1.0));
    }

    #[test]
    fn sign_rule_makes_largest_entry_positive() {
        let w = Matrix::from_fn(5, 5, |i, j| ((i * 5 + j) as f64 * 0.7).cos() * 2.0);
        let f = svd(&w).unwrap();
        for j in 0..5 {
            let col = f.u.column(j);
            let mut best = 0.0_f64;
            let mut best_i = 0;
            for (i, &x) in col.iter().enumerate() {
                if x.abs() > best {
                    best = x.abs();
                    best_i = i;
                }
            }
            assert!(col[best_i] > 0.0, "column {j} largest entry not positive");
        }
    }

    #[test]
    fn truncation_bounds_are_enforced() {
        let w = Matrix::from_fn(4, 6, |i, j| (i + j) as f64);
        assert!(truncated_svd(&w, 0).is_err());
        assert!(truncated_svd(&w, 5).is_err());
        let f = truncated_svd(&w, 2).unwrap();
        assert_eq!(f.u.shape(), (4, 2));
        assert_eq!(f.vt.shape(), (2, 6));
        assert_eq!(f.singular.len(), 2);
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let w = Matrix::from_fn(9, 5, |i, j| ((i * 5 + j) as f64 * 1.3).tan().fract());
        let f1 = svd(&w).unwrap();
        let f2 = svd(&w).unwrap();
        assert_eq!(f1.u.data(), f2.u.data());
        assert_eq!(f1.singular, f2.singular);
        assert_eq!(f1.vt.data(), f2.vt.data());
    }
}
