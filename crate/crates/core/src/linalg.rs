//! Small dense linear-algebra helpers shared by the filters and tests.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Starting jitter for the regularized SPD solve.
pub const JITTER_START: f64 = 1e-9;
/// Largest jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-5;

/// Replace `m` by `(m + mᵀ)/2` in place.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

/// Largest absolute entry of `m - mᵀ`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let mut s = m.clone();
    symmetrize(&mut s);
    s.symmetric_eigen()
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// True when `m` is symmetric within `sym_tol` and its smallest eigenvalue is
/// at least `-psd_rel_tol * trace(m)`.
pub fn is_symmetric_psd(m: &DMatrix<f64>, sym_tol: f64, psd_rel_tol: f64) -> bool {
    if !m.iter().all(|v| v.is_finite()) || asymmetry(m) > sym_tol {
        return false;
    }
    min_eigenvalue(m) >= -psd_rel_tol * m.trace().abs()
}

/// Outcome of a jittered SPD solve.
#[derive(Debug, Clone)]
pub struct SpdSolve {
    pub solution: DMatrix<f64>,
    /// Jitter that had to be added to the diagonal (0 when none).
    pub jitter: f64,
}

/// Solve `a · X = rhs` for symmetric positive (semi)definite `a` by Cholesky.
///
/// A plain factorization is tried first. On failure the diagonal is loaded
/// with `1e-9`, escalating by ×10 up to `1e-5`, before a numeric error is
/// raised.
pub fn solve_spd_jittered(a: &DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<SpdSolve> {
    if let Some(chol) = a.clone().cholesky() {
        return Ok(SpdSolve {
            solution: chol.solve(rhs),
            jitter: 0.0,
        });
    }
    let n = a.nrows();
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let loaded = a + DMatrix::<f64>::identity(n, n) * jitter;
        if let Some(chol) = loaded.cholesky() {
            return Ok(SpdSolve {
                solution: chol.solve(rhs),
                jitter,
            });
        }
        jitter *= 10.0;
    }
    Err(Error::numeric(format!(
        "{n}x{n} covariance is not positive definite even with jitter {JITTER_MAX:e}"
    )))
}

/// Spectral condition number of a symmetric matrix (∞ when singular).
pub fn condition_number_sym(m: &DMatrix<f64>) -> f64 {
    let eig = m.clone().symmetric_eigen().eigenvalues;
    let (lo, hi) = eig.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| {
        (lo.min(v.abs()), hi.max(v.abs()))
    });
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Factor `L` with `L·Lᵀ = m` for a symmetric PSD `m`, tolerant of singular
/// matrices (uses the eigendecomposition, clipping tiny negative eigenvalues).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let mut s = m.clone();
    symmetrize(&mut s);
    let eig = s.symmetric_eigen();
    let mut factor = eig.eigenvectors.clone();
    for (j, &lambda) in eig.eigenvalues.iter().enumerate() {
        let scale = lambda.max(0.0).sqrt();
        factor.column_mut(j).scale_mut(scale);
    }
    factor
}

/// Block-diagonal matrix with `count` copies of `block`.
pub fn block_diag_repeat(block: &DMatrix<f64>, count: usize) -> DMatrix<f64> {
    let (r, c) = block.shape();
    let mut out = DMatrix::zeros(r * count, c * count);
    for k in 0..count {
        out.view_mut((k * r, k * c), (r, c)).copy_from(block);
    }
    out
}

pub fn all_finite_vec(v: &DVector<f64>) -> bool {
    v.iter().all(|x| x.is_finite())
}

pub fn all_finite_mat(m: &DMatrix<f64>) -> bool {
    m.iter().all(|x| x.is_finite())
}
