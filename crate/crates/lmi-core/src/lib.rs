//! Linear matrix inequality modelling and a dense primal-dual SDP solver.
//!
//! Problems are built from [`AffineMatrixExpr`] values over decision
//! variables owned by an [`LmiProblem`], then canonicalized (free entries of
//! every variable stacked into one vector, equalities eliminated, implied
//! zero rows removed) and solved by a two-phase interior-point method.

mod canon;
mod expr;
mod ipm;
mod problem;
pub mod psd;
mod svec;

pub use expr::{AffineMatrixExpr, Term, VarRef};
pub use problem::{
    Constraint, LmiProblem, LmiSolution, Sense, SolveOptions, SolveStatus, VarKind,
};
pub use psd::{check_psd, check_psd_schur, min_eigenvalue, symmetrize};
pub use svec::{smat, svec, svec_len};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum LmiError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric (defect {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("variable does not belong to this problem")]
    ForeignVariable,
    #[error("expected a 1x1 expression, got {0}x{1}")]
    NotScalar(usize, usize),
    #[error("problem has no constraints")]
    Empty,
    #[error("invalid argument: {0}")]
    Invalid(String),
}
