//! Isometric half-vectorization of symmetric matrices.

use nalgebra::{DMatrix, DVector};

use crate::psd::{symmetry_defect, DEFAULT_SYM_TOL};
use crate::LmiError;

/// Number of entries in the half-vectorization of an `n x n` matrix.
pub fn svec_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Stacks the upper triangle column by column, off-diagonals scaled by √2.
///
/// With this scaling `svec(S)·svec(T) = tr(S T)`.
pub fn svec(s: &DMatrix<f64>) -> Result<DVector<f64>, LmiError> {
    if !s.is_square() {
        return Err(LmiError::Dimension(format!(
            "svec needs a square matrix, got {}x{}",
            s.nrows(),
            s.ncols()
        )));
    }
    let defect = symmetry_defect(s);
    if defect > DEFAULT_SYM_TOL {
        return Err(LmiError::NotSymmetric(defect));
    }
    let n = s.nrows();
    let mut out = DVector::zeros(svec_len(n));
    let mut k = 0;
    for j in 0..n {
        for i in 0..j {
            out[k] = std::f64::consts::SQRT_2 * 0.5 * (s[(i, j)] + s[(j, i)]);
            k += 1;
        }
        out[k] = s[(j, j)];
        k += 1;
    }
    Ok(out)
}

/// Inverse of [`svec`].
pub fn smat(v: &DVector<f64>) -> Result<DMatrix<f64>, LmiError> {
    let len = v.len();
    // n(n+1)/2 = len
    let n = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    if svec_len(n) != len {
        return Err(LmiError::Dimension(format!(
            "{len} is not a triangular number"
        )));
    }
    let mut s = DMatrix::zeros(n, n);
    let mut k = 0;
    for j in 0..n {
        for i in 0..j {
            let x = v[k] / std::f64::consts::SQRT_2;
            s[(i, j)] = x;
            s[(j, i)] = x;
            k += 1;
        }
        s[(j, j)] = v[k];
        k += 1;
    }
    Ok(s)
}
