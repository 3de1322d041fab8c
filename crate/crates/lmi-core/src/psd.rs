//! Numerical positive-(semi)definiteness checks.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::LmiError;

pub const DEFAULT_SYM_TOL: f64 = 1e-9;

/// Largest |M - Mᵀ| relative to max(1, |M|∞).
pub fn symmetry_defect(m: &DMatrix<f64>) -> f64 {
    if !m.is_square() {
        return f64::INFINITY;
    }
    let n = m.nrows();
    let mut worst: f64 = 0.0;
    let mut scale: f64 = 1.0;
    for i in 0..n {
        for j in 0..n {
            scale = scale.max(m[(i, j)].abs());
            if j > i {
                worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
    }
    worst / scale
}

fn validate(m: &DMatrix<f64>) -> Result<(), LmiError> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(LmiError::NonFinite);
    }
    let d = symmetry_defect(m);
    if d > DEFAULT_SYM_TOL {
        return Err(LmiError::NotSymmetric(d));
    }
    Ok(())
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Smallest eigenvalue of the symmetric part; +inf for an empty matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Eigenvalue test: λ_min ≥ -tol (semidefinite) or λ_min ≥ tol (strict).
pub fn check_psd(m: &DMatrix<f64>, strict: bool, tol: f64) -> Result<bool, LmiError> {
    validate(m)?;
    let lmin = min_eigenvalue(m);
    Ok(if strict { lmin >= tol } else { lmin >= -tol })
}

/// Schur-complement test on the split `[[P, Q], [Qᵀ, R]]` with `P` the
/// leading `k x k` block. `P` must itself pass the strict test; the verdict
/// is then that of `R - Qᵀ P⁻¹ Q`.
pub fn check_psd_schur(
    m: &DMatrix<f64>,
    k: usize,
    strict: bool,
    tol: f64,
) -> Result<bool, LmiError> {
    validate(m)?;
    let n = m.nrows();
    if k == 0 || k > n {
        return Err(LmiError::Dimension(format!("split {k} outside 1..={n}")));
    }
    let p = symmetrize(&m.view((0, 0), (k, k)).into_owned());
    if min_eigenvalue(&p) < tol.max(0.0) {
        return Err(LmiError::Dimension(
            "leading block is not positive definite".into(),
        ));
    }
    if k == n {
        return check_psd(&p, strict, tol);
    }
    let q = m.view((0, k), (k, n - k)).into_owned();
    let r = m.view((k, k), (n - k, n - k)).into_owned();
    let chol = p.cholesky().ok_or(LmiError::Dimension(
        "leading block is not positive definite".into(),
    ))?;
    let s = r - q.transpose() * chol.solve(&q);
    check_psd(&symmetrize(&s), strict, tol)
}
