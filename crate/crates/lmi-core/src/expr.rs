//! Affine matrix expressions over scalar and matrix decision variables.

use std::ops::{Add, Mul, Neg, Sub};

use nalgebra::DMatrix;

use crate::LmiError;

/// Handle to a decision variable owned by one [`crate::LmiProblem`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VarRef {
    pub(crate) problem: u64,
    pub(crate) index: usize,
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) scalar: bool,
}

impl VarRef {
    pub fn index(&self) -> usize {
        self.index
    }
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }
    pub fn is_scalar(&self) -> bool {
        self.scalar
    }
}

/// One `L · X̂ · R` term. For a scalar variable `X̂ = x·I_k` with
/// `k = left.ncols()`; otherwise `X̂` is the variable or its transpose.
#[derive(Clone, Debug)]
pub struct Term {
    pub left: DMatrix<f64>,
    pub var: VarRef,
    pub transpose: bool,
    pub right: DMatrix<f64>,
}

impl Term {
    fn rows(&self) -> usize {
        self.left.nrows()
    }
    fn cols(&self) -> usize {
        self.right.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct AffineMatrixExpr {
    rows: usize,
    cols: usize,
    constant: DMatrix<f64>,
    terms: Vec<Term>,
}

impl AffineMatrixExpr {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            constant: DMatrix::zeros(rows, cols),
            terms: Vec::new(),
        }
    }

    pub fn constant(m: DMatrix<f64>) -> Self {
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            constant: m,
            terms: Vec::new(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::constant(DMatrix::identity(n, n))
    }

    /// The variable itself (a 1x1 expression for scalars).
    pub fn var(v: VarRef) -> Self {
        let (r, c) = v.shape();
        Self {
            rows: r,
            cols: c,
            constant: DMatrix::zeros(r, c),
            terms: vec![Term {
                left: DMatrix::identity(r, r),
                var: v,
                transpose: false,
                right: DMatrix::identity(c, c),
            }],
        }
    }

    /// `x · M` for a scalar variable `x`.
    pub fn scaled(v: VarRef, m: DMatrix<f64>) -> Self {
        assert!(v.is_scalar(), "scaled() needs a scalar variable");
        let (r, c) = (m.nrows(), m.ncols());
        Self {
            rows: r,
            cols: c,
            constant: DMatrix::zeros(r, c),
            terms: vec![Term {
                left: m,
                var: v,
                transpose: false,
                right: DMatrix::identity(c, c),
            }],
        }
    }

    /// `x · I_n` for a scalar variable `x`.
    pub fn scaled_identity(v: VarRef, n: usize) -> Self {
        Self::scaled(v, DMatrix::identity(n, n))
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn constant_part(&self) -> &DMatrix<f64> {
        &self.constant
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_constant(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn variables(&self) -> Vec<VarRef> {
        let mut v: Vec<VarRef> = self.terms.iter().map(|t| t.var).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn try_add(&self, other: &Self) -> Result<Self, LmiError> {
        if self.dims() != other.dims() {
            return Err(LmiError::Dimension(format!(
                "cannot add {:?} and {:?}",
                self.dims(),
                other.dims()
            )));
        }
        let mut out = self.clone();
        out.constant += &other.constant;
        out.terms.extend(other.terms.iter().cloned());
        Ok(out)
    }

    pub fn scale(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.constant *= a;
        for t in &mut out.terms {
            t.left *= a;
        }
        out
    }

    /// `M · self`.
    pub fn lmul(&self, m: &DMatrix<f64>) -> Self {
        assert_eq!(m.ncols(), self.rows, "lmul dimension mismatch");
        Self {
            rows: m.nrows(),
            cols: self.cols,
            constant: m * &self.constant,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    left: m * &t.left,
                    var: t.var,
                    transpose: t.transpose,
                    right: t.right.clone(),
                })
                .collect(),
        }
    }

    /// `self · M`.
    pub fn rmul(&self, m: &DMatrix<f64>) -> Self {
        assert_eq!(m.nrows(), self.cols, "rmul dimension mismatch");
        Self {
            rows: self.rows,
            cols: m.ncols(),
            constant: &self.constant * m,
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    left: t.left.clone(),
                    var: t.var,
                    transpose: t.transpose,
                    right: &t.right * m,
                })
                .collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            constant: self.constant.transpose(),
            terms: self
                .terms
                .iter()
                .map(|t| Term {
                    left: t.right.transpose(),
                    var: t.var,
                    transpose: !t.transpose,
                    right: t.left.transpose(),
                })
                .collect(),
        }
    }

    /// `(self + selfᵀ) / 2`.
    pub fn sym_part(&self) -> Self {
        (self.clone() + self.transpose()).scale(0.5)
    }

    /// `self + selfᵀ`, the `He(·)` operator.
    pub fn he(&self) -> Self {
        self.clone() + self.transpose()
    }

    /// Entry `(i, j)` as a 1x1 expression.
    pub fn entry(&self, i: usize, j: usize) -> Self {
        let mut ei = DMatrix::zeros(1, self.rows);
        ei[(0, i)] = 1.0;
        let mut ej = DMatrix::zeros(self.cols, 1);
        ej[(j, 0)] = 1.0;
        self.lmul(&ei).rmul(&ej)
    }

    /// Sub-block of size `(r, c)` at offset `(i, j)`.
    pub fn view(&self, i: usize, j: usize, r: usize, c: usize) -> Self {
        let mut sel_r = DMatrix::zeros(r, self.rows);
        for k in 0..r {
            sel_r[(k, i + k)] = 1.0;
        }
        let mut sel_c = DMatrix::zeros(self.cols, c);
        for k in 0..c {
            sel_c[(j + k, k)] = 1.0;
        }
        self.lmul(&sel_r).rmul(&sel_c)
    }

    /// Sum of diagonal entries as a 1x1 expression.
    pub fn trace(&self) -> Self {
        assert_eq!(self.rows, self.cols, "trace of a non-square expression");
        let mut out = Self::zeros(1, 1);
        for k in 0..self.rows {
            out = out + self.entry(k, k);
        }
        out
    }

    /// Assembles a block matrix. `None` entries are zero blocks; every block
    /// row needs at least one sized entry in each row and column, or the sizes
    /// are taken from `row_sizes`/`col_sizes`.
    pub fn block(
        blocks: &[Vec<Option<AffineMatrixExpr>>],
        row_sizes: &[usize],
        col_sizes: &[usize],
    ) -> Result<Self, LmiError> {
        if blocks.len() != row_sizes.len() {
            return Err(LmiError::Dimension("block row count mismatch".into()));
        }
        let rows: usize = row_sizes.iter().sum();
        let cols: usize = col_sizes.iter().sum();
        let mut out = Self::zeros(rows, cols);
        let mut r0 = 0;
        for (bi, brow) in blocks.iter().enumerate() {
            if brow.len() != col_sizes.len() {
                return Err(LmiError::Dimension(format!(
                    "block row {bi} has {} entries, expected {}",
                    brow.len(),
                    col_sizes.len()
                )));
            }
            let mut c0 = 0;
            for (bj, b) in brow.iter().enumerate() {
                if let Some(e) = b {
                    if e.dims() != (row_sizes[bi], col_sizes[bj]) {
                        return Err(LmiError::Dimension(format!(
                            "block ({bi},{bj}) is {:?}, expected ({}, {})",
                            e.dims(),
                            row_sizes[bi],
                            col_sizes[bj]
                        )));
                    }
                    out = out + e.embed(rows, cols, r0, c0);
                }
                c0 += col_sizes[bj];
            }
            r0 += row_sizes[bi];
        }
        Ok(out)
    }

    /// Places `self` inside a zero `rows x cols` expression at `(r0, c0)`.
    pub fn embed(&self, rows: usize, cols: usize, r0: usize, c0: usize) -> Self {
        let mut pr = DMatrix::zeros(rows, self.rows);
        for k in 0..self.rows {
            pr[(r0 + k, k)] = 1.0;
        }
        let mut pc = DMatrix::zeros(self.cols, cols);
        for k in 0..self.cols {
            pc[(k, c0 + k)] = 1.0;
        }
        self.lmul(&pr).rmul(&pc)
    }

    /// Evaluates the expression at an assignment.
    pub fn eval<F>(&self, value: F) -> DMatrix<f64>
    where
        F: Fn(&VarRef) -> DMatrix<f64>,
    {
        let mut out = self.constant.clone();
        for t in &self.terms {
            let x = value(&t.var);
            if t.var.is_scalar() {
                out += &t.left * &t.right * x[(0, 0)];
            } else if t.transpose {
                out += &t.left * x.transpose() * &t.right;
            } else {
                out += &t.left * x * &t.right;
            }
        }
        out
    }

    pub(crate) fn check_terms(&self) -> Result<(), LmiError> {
        for t in &self.terms {
            let (vr, vc) = if t.var.is_scalar() {
                (t.left.ncols(), t.left.ncols())
            } else if t.transpose {
                (t.var.cols, t.var.rows)
            } else {
                (t.var.rows, t.var.cols)
            };
            if t.rows() != self.rows
                || t.cols() != self.cols
                || t.left.ncols() != vr
                || t.right.nrows() != vc
            {
                return Err(LmiError::Dimension(
                    "term does not conform to expression".into(),
                ));
            }
        }
        Ok(())
    }
}

impl Add for AffineMatrixExpr {
    type Output = AffineMatrixExpr;
    fn add(self, rhs: Self) -> Self {
        self.try_add(&rhs).expect("dimension mismatch in +")
    }
}

impl Sub for AffineMatrixExpr {
    type Output = AffineMatrixExpr;
    fn sub(self, rhs: Self) -> Self {
        self.try_add(&rhs.scale(-1.0))
            .expect("dimension mismatch in -")
    }
}

impl Neg for AffineMatrixExpr {
    type Output = AffineMatrixExpr;
    fn neg(self) -> Self {
        self.scale(-1.0)
    }
}

impl Mul<&DMatrix<f64>> for AffineMatrixExpr {
    type Output = AffineMatrixExpr;
    fn mul(self, rhs: &DMatrix<f64>) -> Self {
        self.rmul(rhs)
    }
}

impl Mul<AffineMatrixExpr> for &DMatrix<f64> {
    type Output = AffineMatrixExpr;
    fn mul(self, rhs: AffineMatrixExpr) -> AffineMatrixExpr {
        rhs.lmul(self)
    }
}
