//! Symmetric positive-definite solves with diagonal jitter, and PSD factors
//! for Gaussian sampling.

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use thiserror::Error;

/// First non-zero jitter, relative to `trace / n`.
pub const JITTER_START: f64 = 1e-12;
/// Largest jitter tried, relative to `trace / n`.
pub const JITTER_MAX: f64 = 1e-4;
/// Negative eigenvalues below this (relative to `trace / n`) are reported when clipped.
pub const PSD_WARN_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix contains non-finite entries")]
    NonFinite,
    #[error("Cholesky factorization failed up to jitter {final_jitter:e}")]
    IllConditioned { final_jitter: f64 },
}

/// Cholesky factor of `A + jitter·I` for the smallest jitter on the ladder
/// `0, 1e-12·tr/n, 1e-11·tr/n, …, 1e-4·tr/n` that factorizes.
#[derive(Debug, Clone)]
pub struct JitteredCholesky {
    factor: Cholesky<f64, Dyn>,
    jitter: f64,
}

impl JitteredCholesky {
    pub fn new(a: &DMatrix<f64>) -> Result<Self, LinalgError> {
        let n = a.nrows();
        if n != a.ncols() {
            return Err(LinalgError::NotSquare {
                rows: n,
                cols: a.ncols(),
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        if n == 0 {
            return Ok(Self {
                factor: Cholesky::new(a.clone()).expect("empty matrix factorizes"),
                jitter: 0.0,
            });
        }
        let scale = (a.trace() / n as f64).abs().max(f64::MIN_POSITIVE);
        let mut ladder = vec![0.0];
        let mut rel = JITTER_START;
        while rel <= JITTER_MAX * (1.0 + 1e-9) {
            ladder.push(rel * scale);
            rel *= 10.0;
        }
        let mut last = 0.0;
        for jitter in ladder {
            last = jitter;
            let mut shifted = a.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            let diag = shifted.diagonal();
            if let Some(factor) = Cholesky::new(shifted) {
                if pivots_are_sound(&factor, &diag) {
                    if jitter > 0.0 {
                        warn!("SPD solve needed diagonal jitter {jitter:e}");
                    }
                    return Ok(Self { factor, jitter });
                }
            }
        }
        Err(LinalgError::IllConditioned { final_jitter: last })
    }

    /// Jitter that was added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.factor.solve(b)
    }
}

/// Rejects factorizations whose pivots were lost to cancellation: a squared
/// pivot at the rounding level of the original diagonal entry means the
/// matrix was numerically singular, even if the arithmetic stayed positive.
fn pivots_are_sound(factor: &Cholesky<f64, Dyn>, diag: &DVector<f64>) -> bool {
    let n = diag.len() as f64;
    factor
        .l_dirty()
        .diagonal()
        .iter()
        .zip(diag.iter())
        .all(|(&l, &a)| l.is_finite() && l * l > 16.0 * n * f64::EPSILON * a.abs())
}

/// `L` with `L Lᵀ ≈ A` for a symmetric, possibly marginally indefinite `A`.
///
/// Negative eigenvalues are clipped to zero; a warning is logged when the
/// most negative one exceeds `1e-8·tr/n` in magnitude. Returns the factor and
/// the most negative eigenvalue (0 if none).
pub fn psd_factor(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64), LinalgError> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(LinalgError::NotSquare {
            rows: n,
            cols: a.ncols(),
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    if n == 0 {
        return Ok((DMatrix::zeros(0, 0), 0.0));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let most_negative = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.min(v));
    let scale = (a.trace() / n as f64).abs();
    if most_negative < -PSD_WARN_TOLERANCE * scale {
        warn!("clipping negative eigenvalue {most_negative:e} (trace/n = {scale:e})");
    }
    let mut factor = eig.eigenvectors;
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(s);
    }
    Ok((factor, most_negative))
}

/// Most negative eigenvalue allowed for a Gram-type matrix: `-1e-8·tr/n`.
pub fn psd_floor(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows().max(1);
    -PSD_WARN_TOLERANCE * (a.trace() / n as f64).abs()
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    if a.nrows() == 0 {
        return 0.0;
    }
    let sym = (a + a.transpose()) * 0.5;
    SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, &v| m.min(v))
}

/// Largest absolute asymmetry `|a_ij − a_ji|`.
pub fn asymmetry(a: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((a[(i, j)] - a[(j, i)]).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_well_conditioned_system_without_jitter() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let chol = JitteredCholesky::new(&a).unwrap();
        assert_eq!(chol.jitter(), 0.0);
        let x = chol.solve(&DVector::from_vec(vec![1.0, 2.0]));
        // inverse is [3 -1; -1 4] / 11
        assert!((x[0] - 1.0 / 11.0).abs() < 1e-15);
        assert!((x[1] - 7.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn singular_matrix_gets_jitter() {
        let a = DMatrix::from_element(3, 3, 2.0);
        let chol = JitteredCholesky::new(&a).unwrap();
        assert!(chol.jitter() > 0.0);
        assert!(chol.jitter() <= JITTER_MAX * 2.0 + 1e-18);
    }

    #[test]
    fn indefinite_matrix_fails_with_final_jitter() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        match JitteredCholesky::new(&a) {
            Err(LinalgError::IllConditioned { final_jitter }) => {
                // tr/n = 0 here, so the ladder collapses onto the tiny floor
                assert!(final_jitter >= 0.0);
            }
            other => panic!("unexpected {other:?}"),
        }
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -1.0]);
        match JitteredCholesky::new(&a) {
            Err(LinalgError::IllConditioned { final_jitter }) => {
                assert!((final_jitter - 1e-4 * 0.5).abs() < 1e-15);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn psd_factor_reconstructs_and_clips() {
        let a = DMatrix::from_row_slice(3, 3, &[2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0]);
        let (l, neg) = psd_factor(&a).unwrap();
        assert_eq!(neg, 0.0);
        assert!((&l * l.transpose() - &a).abs().max() < 1e-13);
        let b = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-3]);
        let (l, neg) = psd_factor(&b).unwrap();
        assert!((neg + 1e-3).abs() < 1e-15);
        let r = &l * l.transpose();
        assert!((r[(0, 0)] - 1.0).abs() < 1e-15 && r[(1, 1)].abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(JitteredCholesky::new(&DMatrix::zeros(2, 3)).is_err());
        let mut a = DMatrix::identity(2, 2);
        a[(0, 1)] = f64::NAN;
        assert_eq!(JitteredCholesky::new(&a).unwrap_err(), LinalgError::NonFinite);
    }
}
