//! Invertible column transforms applied to weights before decomposition.
//!
//! A transform `S` turns the plain truncation of `W` into a truncation of
//! `W * S`; the right factor is mapped back through `S^{-1}` afterwards, so
//! the decomposed layer still approximates `W` itself. Choosing `S` from
//! activation statistics steers the truncation toward directions the data
//! actually exercises.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::stats::ActivationStats;

/// Statistic used for diagonal (activation-magnitude) scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StatKind {
    AbsMean,
    AbsMax,
}

impl StatKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StatKind::AbsMean => "abs_mean",
            StatKind::AbsMax => "abs_max",
        }
    }

    pub fn parse(s: &str) -> Option<StatKind> {
        match s {
            "abs_mean" => Some(StatKind::AbsMean),
            "abs_max" => Some(StatKind::AbsMax),
            _ => None,
        }
    }
}

/// Floor applied to statistics before exponentiation, so dead channels
/// cannot produce a singular transform.
pub const STAT_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub enum ScalingTransform {
    /// `S = diag(scale)`.
    Diagonal { scale: Vec<f64> },
    /// `S = L`, a lower-triangular Cholesky factor of the activation Gram.
    Cholesky { l: Matrix },
}

impl ScalingTransform {
    pub fn identity(n: usize) -> Self {
        ScalingTransform::Diagonal { scale: vec![1.0; n] }
    }

    /// Diagonal scaling with entries `max(stat_i, STAT_FLOOR)^alpha`.
    pub fn from_stats(stats: &ActivationStats, kind: StatKind, alpha: f64) -> Result<Self> {
        if !alpha.is_finite() {
            return Err(Error::invalid(format!("alpha must be finite, got {alpha}")));
        }
        let raw = match kind {
            StatKind::AbsMean => stats.abs_mean(),
            StatKind::AbsMax => stats.abs_max(),
        };
        let scale = raw.iter().map(|&v| v.max(STAT_FLOOR).powf(alpha)).collect();
        Ok(ScalingTransform::Diagonal { scale })
    }

    /// Whitening transform: the Cholesky factor of the activation Gram,
    /// regularized with the standard trace-scaled jitter.
    pub fn whitening(stats: &ActivationStats) -> Result<Self> {
        let gram = stats.gram();
        let n = gram.rows();
        let trace: f64 = (0..n).map(|i| gram.get(i, i)).sum();
        let jitter = if trace > 0.0 { 1e-6 * trace / n as f64 } else { 1e-6 };
        let l = crate::cholesky::cholesky_lower(gram, jitter)?;
        Ok(ScalingTransform::Cholesky { l })
    }

    pub fn dim(&self) -> usize {
        match self {
            ScalingTransform::Diagonal { scale } => scale.len(),
            ScalingTransform::Cholesky { l } => l.rows(),
        }
    }

    /// `W * S`.
    pub fn apply_right(&self, w: &Matrix) -> Result<Matrix> {
        if w.cols() != self.dim() {
            return Err(Error::invalid(format!(
                "transform dimension {} does not match {} weight columns",
                self.dim(),
                w.cols()
            )));
        }
        Ok(match self {
            ScalingTransform::Diagonal { scale } => w.mul_diag_right(scale),
            ScalingTransform::Cholesky { l } => w.matmul(l),
        })
    }

    /// `V * S^{-1}` for a row-block `V` (applied to truncated right factors).
    pub fn apply_inverse_right(&self, v: &Matrix) -> Result<Matrix> {
        if v.cols() != self.dim() {
            return Err(Error::invalid(format!(
                "transform dimension {} does not match {} factor columns",
                self.dim(),
                v.cols()
            )));
        }
        match self {
            ScalingTransform::Diagonal { scale } => {
                if let Some(i) = scale.iter().position(|&s| s == 0.0 || !s.is_finite()) {
                    return Err(Error::numerical(format!(
                        "diagonal transform is not invertible at channel {i} (scale {})",
                        scale[i]
                    )));
                }
                let inv: Vec<f64> = scale.iter().map(|s| 1.0 / s).collect();
                Ok(v.mul_diag_right(&inv))
            }
            ScalingTransform::Cholesky { l } => solve_right_lower(v, l),
        }
    }
}

/// Solve `X * L = V` for `X`, with `L` lower triangular: back substitution
/// per row, from the last column to the first.
fn solve_right_lower(v: &Matrix, l: &Matrix) -> Result<Matrix> {
    let n = l.rows();
    for j in 0..n {
        if l.get(j, j) == 0.0 {
            return Err(Error::numerical(format!(
                "triangular transform has a zero pivot at {j}"
            )));
        }
    }
    let mut x = Matrix::zeros(v.rows(), n);
    for r in 0..v.rows() {
        let mut row = vec![0.0; n];
        for j in (0..n).rev() {
            let mut acc = v.get(r, j);
            for (i, xi) in row.iter().enumerate().skip(j + 1) {
                acc -= xi * l.get(i, j);
            }
            row[j] = acc / l.get(j, j);
        }
        for (j, &val) in row.iter().enumerate() {
            x.set(r, j, val);
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn random_matrix(r: usize, c: usize, seed: u64) -> Matrix {
        let mut g = SplitMix64::new(seed);
        Matrix::from_fn(r, c, |_, _| g.next_gaussian())
    }

    #[test]
    fn identity_transform_is_neutral() {
        let w = random_matrix(3, 5, 1);
        let t = ScalingTransform::identity(5);
        assert_eq!(t.apply_right(&w).unwrap(), w);
        assert_eq!(t.apply_inverse_right(&w).unwrap(), w);
    }

    #[test]
    fn diagonal_round_trip_recovers_input() {
        let w = random_matrix(4, 6, 2);
        let scale: Vec<f64> = (0..6).map(|i| 0.3 + i as f64).collect();
        let t = ScalingTransform::Diagonal { scale };
        let back = t.apply_inverse_right(&t.apply_right(&w).unwrap()).unwrap();
        assert!(back.max_abs_diff(&w) < 1e-12);
    }

    #[test]
    fn cholesky_round_trip_recovers_input() {
        let x = random_matrix(5, 40, 3);
        let stats = crate::stats::ActivationStats::from_activations(&x);
        let t = ScalingTransform::whitening(&stats).unwrap();
        let w = random_matrix(4, 5, 4);
        let back = t.apply_inverse_right(&t.apply_right(&w).unwrap()).unwrap();
        let rel = back.sub(&w).frob_norm() / w.frob_norm();
        assert!(rel < 1e-9, "relative error {rel}");
    }

    #[test]
    fn alpha_zero_scaling_is_identity() {
        let x = random_matrix(4, 16, 5);
        let stats = crate::stats::ActivationStats::from_activations(&x);
        let t = ScalingTransform::from_stats(&stats, StatKind::AbsMean, 0.0).unwrap();
        match t {
            ScalingTransform::Diagonal { scale } => {
                assert!(scale.iter().all(|&s| s == 1.0));
            }
            _ => panic!("expected diagonal"),
        }
    }

    #[test]
    fn dead_channels_are_floored_not_zeroed() {
        let x = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let stats = crate::stats::ActivationStats::from_activations(&x);
        let t = ScalingTransform::from_stats(&stats, StatKind::AbsMax, 0.5).unwrap();
        match &t {
            ScalingTransform::Diagonal { scale } => {
                assert_eq!(scale[1], STAT_FLOOR.sqrt());
            }
            _ => panic!("expected diagonal"),
        }
        // Still invertible.
        let w = random_matrix(3, 2, 6);
        assert!(t.apply_inverse_right(&w).is_ok());
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let t = ScalingTransform::identity(4);
        let w = random_matrix(3, 5, 7);
        assert!(t.apply_right(&w).is_err());
        assert!(t.apply_inverse_right(&w).is_err());
    }

    #[test]
    fn abs_mean_and_abs_max_differ_on_skewed_data() {
        let x = Matrix::from_vec(1, 4, vec![0.1, 0.1, 0.1, 10.0]).unwrap();
        let stats = crate::stats::ActivationStats::from_activations(&x);
        let mean_t = ScalingTransform::from_stats(&stats, StatKind::AbsMean, 1.0).unwrap();
        let max_t = ScalingTransform::from_stats(&stats, StatKind::AbsMax, 1.0).unwrap();
        let (m, x_) = match (mean_t, max_t) {
            (ScalingTransform::Diagonal { scale: a }, ScalingTransform::Diagonal { scale: b }) => {
                (a[0], b[0])
            }
            _ => unreachable!(),
        };
        assert!((m - 2.575).abs() < 1e-12);
        assert_eq!(x_, 10.0);
    }
}
