//! Problem builder, solve options and solution type.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::DMatrix;

use crate::expr::{AffineMatrixExpr, VarRef};
use crate::psd::{min_eigenvalue, symmetrize};
use crate::LmiError;

static NEXT_PROBLEM: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Debug, PartialEq)]
pub enum VarKind {
    Scalar,
    Symmetric(usize),
    /// Rectangular matrix; `mask[i * cols + j] == false` pins entry (i, j) to zero.
    Rect {
        rows: usize,
        cols: usize,
        mask: Option<Vec<bool>>,
    },
}

#[derive(Clone, Debug)]
pub(crate) struct VarInfo {
    pub kind: VarKind,
    pub name: String,
    pub bounds: (Option<f64>, Option<f64>),
    /// Offset of this variable's first free entry in the stacked vector.
    pub offset: usize,
    /// (row, col) of each free entry; symmetric variables list row <= col.
    pub entries: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sense {
    Psd,
    /// `expr - margin * I ⪰ 0`.
    Pd(f64),
    EqZero,
}

#[derive(Clone, Debug)]
pub struct Constraint {
    pub name: String,
    pub expr: AffineMatrixExpr,
    pub sense: Sense,
}

impl Constraint {
    pub fn margin(&self) -> f64 {
        match self.sense {
            Sense::Pd(m) => m,
            _ => 0.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LmiProblem {
    id: u64,
    pub(crate) vars: Vec<VarInfo>,
    pub(crate) n_entries: usize,
    pub(crate) constraints: Vec<Constraint>,
    /// Objective in minimization form.
    pub(crate) objective: Option<AffineMatrixExpr>,
    maximize: bool,
}

impl Default for LmiProblem {
    fn default() -> Self {
        Self::new()
    }
}

impl LmiProblem {
    pub fn new() -> Self {
        Self {
            id: NEXT_PROBLEM.fetch_add(1, Ordering::Relaxed),
            vars: Vec::new(),
            n_entries: 0,
            constraints: Vec::new(),
            objective: None,
            maximize: false,
        }
    }

    fn push_var(
        &mut self,
        name: &str,
        kind: VarKind,
        bounds: (Option<f64>, Option<f64>),
    ) -> VarRef {
        let (rows, cols, entries) = match &kind {
            VarKind::Scalar => (1, 1, vec![(0, 0)]),
            VarKind::Symmetric(n) => {
                assert!(*n >= 1, "symmetric variable needs n >= 1");
                let mut e = Vec::new();
                for j in 0..*n {
                    for i in 0..=j {
                        e.push((i, j));
                    }
                }
                (*n, *n, e)
            }
            VarKind::Rect { rows, cols, mask } => {
                if let Some(m) = mask {
                    assert_eq!(m.len(), rows * cols, "mask must be rows x cols");
                }
                let mut e = Vec::new();
                for i in 0..*rows {
                    for j in 0..*cols {
                        if mask.as_ref().is_none_or(|m| m[i * cols + j]) {
                            e.push((i, j));
                        }
                    }
                }
                (*rows, *cols, e)
            }
        };
        let index = self.vars.len();
        let offset = self.n_entries;
        self.n_entries += entries.len();
        let scalar = matches!(kind, VarKind::Scalar);
        self.vars.push(VarInfo {
            kind,
            name: name.to_string(),
            bounds,
            offset,
            entries,
        });
        VarRef {
            problem: self.id,
            index,
            rows,
            cols,
            scalar,
        }
    }

    pub fn scalar(&mut self, name: &str) -> VarRef {
        self.push_var(name, VarKind::Scalar, (None, None))
    }

    pub fn scalar_bounded(&mut self, name: &str, lo: Option<f64>, hi: Option<f64>) -> VarRef {
        self.push_var(name, VarKind::Scalar, (lo, hi))
    }

    pub fn symmetric(&mut self, name: &str, n: usize) -> VarRef {
        self.push_var(name, VarKind::Symmetric(n), (None, None))
    }

    pub fn rect(&mut self, name: &str, rows: usize, cols: usize) -> VarRef {
        self.push_var(name, VarKind::Rect { rows, cols, mask: None }, (None, None))
    }

    /// Rectangular variable with structural zeros where `mask` is false
    /// (row-major, `rows * cols` long).
    pub fn masked(&mut self, name: &str, rows: usize, cols: usize, mask: Vec<bool>) -> VarRef {
        self.push_var(
            name,
            VarKind::Rect {
                rows,
                cols,
                mask: Some(mask),
            },
            (None, None),
        )
    }

    pub fn var_kind(&self, v: &VarRef) -> &VarKind {
        &self.vars[v.index].kind
    }

    pub fn var_name(&self, v: &VarRef) -> &str {
        &self.vars[v.index].name
    }

    pub fn num_variables(&self) -> usize {
        self.vars.len()
    }

    /// Number of free scalar entries over all variables.
    pub fn num_entries(&self) -> usize {
        self.n_entries
    }

    pub fn constraints(&self) -> &[Constraint] {
        &self.constraints
    }

    fn check_expr(&self, e: &AffineMatrixExpr) -> Result<(), LmiError> {
        if e.constant_part().iter().any(|x| !x.is_finite()) {
            return Err(LmiError::NonFinite);
        }
        for t in e.terms() {
            if t.var.problem != self.id || t.var.index >= self.vars.len() {
                return Err(LmiError::ForeignVariable);
            }
            if t.left.iter().chain(t.right.iter()).any(|x| !x.is_finite()) {
                return Err(LmiError::NonFinite);
            }
        }
        e.check_terms()
    }

    fn add(&mut self, name: &str, expr: AffineMatrixExpr, sense: Sense) -> Result<(), LmiError> {
        self.check_expr(&expr)?;
        let (r, c) = expr.dims();
        if sense != Sense::EqZero && r != c {
            return Err(LmiError::Dimension(format!(
                "matrix inequality '{name}' is {r}x{c}"
            )));
        }
        if let Sense::Pd(m) = sense {
            if !(m > 0.0) {
                return Err(LmiError::Invalid(format!("PD margin must be > 0, got {m}")));
            }
        }
        self.constraints.push(Constraint {
            name: name.to_string(),
            expr,
            sense,
        });
        Ok(())
    }

    /// `expr ⪰ 0`. Symmetry is verified structurally during canonicalization.
    pub fn psd(&mut self, name: &str, expr: AffineMatrixExpr) -> Result<(), LmiError> {
        self.add(name, expr, Sense::Psd)
    }

    /// `expr ⪰ margin·I`.
    pub fn pd(&mut self, name: &str, expr: AffineMatrixExpr, margin: f64) -> Result<(), LmiError> {
        self.add(name, expr, Sense::Pd(margin))
    }

    /// Every entry of `expr` equals zero.
    pub fn eq_zero(&mut self, name: &str, expr: AffineMatrixExpr) -> Result<(), LmiError> {
        self.add(name, expr, Sense::EqZero)
    }

    pub fn minimize(&mut self, obj: AffineMatrixExpr) -> Result<(), LmiError> {
        self.set_objective(obj, false)
    }

    pub fn maximize(&mut self, obj: AffineMatrixExpr) -> Result<(), LmiError> {
        self.set_objective(obj, true)
    }

    fn set_objective(&mut self, obj: AffineMatrixExpr, maximize: bool) -> Result<(), LmiError> {
        self.check_expr(&obj)?;
        let (r, c) = obj.dims();
        if (r, c) != (1, 1) {
            return Err(LmiError::NotScalar(r, c));
        }
        self.objective = Some(if maximize { -obj } else { obj });
        self.maximize = maximize;
        Ok(())
    }

    pub fn has_objective(&self) -> bool {
        self.objective.is_some()
    }

    /// Rebuilds a variable's matrix from the stacked entry vector.
    pub(crate) fn unpack(&self, index: usize, y: &[f64]) -> DMatrix<f64> {
        let v = &self.vars[index];
        let (r, c) = match v.kind {
            VarKind::Scalar => (1, 1),
            VarKind::Symmetric(n) => (n, n),
            VarKind::Rect { rows, cols, .. } => (rows, cols),
        };
        let mut m = DMatrix::zeros(r, c);
        for (k, &(i, j)) in v.entries.iter().enumerate() {
            m[(i, j)] = y[v.offset + k];
            if matches!(v.kind, VarKind::Symmetric(_)) {
                m[(j, i)] = y[v.offset + k];
            }
        }
        m
    }

    pub fn solve(&self, opts: &SolveOptions) -> Result<LmiSolution, LmiError> {
        if self.constraints.is_empty() {
            return Err(LmiError::Empty);
        }
        let out = crate::ipm::solve_problem(self, opts)?;
        Ok(self.finish(out, opts))
    }

    fn finish(&self, out: crate::ipm::RawResult, opts: &SolveOptions) -> LmiSolution {
        let y = out.y;
        let mut values = BTreeMap::new();
        for i in 0..self.vars.len() {
            values.insert(i, self.unpack(i, &y));
        }
        let mut sol = LmiSolution {
            problem: self.id,
            status: out.status,
            values,
            psd_violation: 0.0,
            eq_violation: 0.0,
            worst_constraint: None,
            objective: None,
            iterations: out.iterations,
            note: out.note,
        };
        if !y.is_empty() || !self.constraints.is_empty() {
            let (pv, ev, worst) = self.residuals(&sol);
            sol.psd_violation = pv;
            sol.eq_violation = ev;
            sol.worst_constraint = worst;
        }
        if let Some(obj) = &self.objective {
            let v = sol.eval(obj)[(0, 0)];
            sol.objective = Some(if self.maximize { -v } else { v });
        }
        if matches!(sol.status, SolveStatus::Optimal | SolveStatus::Feasible)
            && (sol.psd_violation > opts.feas_tol || sol.eq_violation > opts.feas_tol)
        {
            let msg = format!(
                "returned point violates constraints (psd {:.2e}, eq {:.2e})",
                sol.psd_violation, sol.eq_violation
            );
            sol.note = if sol.note.is_empty() {
                msg
            } else {
                format!("{}; {}", sol.note, msg)
            };
            sol.status = SolveStatus::NumericalFailure;
        }
        sol
    }

    /// Worst PSD violation (absolute, `max(0, -λmin(expr - margin·I))`), worst
    /// equality violation and the name of the worst PSD constraint.
    fn residuals(&self, sol: &LmiSolution) -> (f64, f64, Option<String>) {
        let mut pv: f64 = 0.0;
        let mut ev: f64 = 0.0;
        let mut worst = None;
        for c in &self.constraints {
            let m = sol.eval(&c.expr);
            match c.sense {
                Sense::EqZero => {
                    ev = ev.max(m.amax());
                }
                Sense::Psd | Sense::Pd(_) => {
                    let n = m.nrows();
                    let shifted = symmetrize(&m) - DMatrix::identity(n, n) * c.margin();
                    let v = (-min_eigenvalue(&shifted)).max(0.0);
                    if v > pv {
                        pv = v;
                        worst = Some(c.name.clone());
                    }
                }
            }
        }
        for (i, v) in self.vars.iter().enumerate() {
            let x = sol.values[&i][(0, 0)];
            if let Some(lo) = v.bounds.0 {
                if lo - x > pv {
                    pv = lo - x;
                    worst = Some(format!("{} >= {lo}", v.name));
                }
            }
            if let Some(hi) = v.bounds.1 {
                if x - hi > pv {
                    pv = x - hi;
                    worst = Some(format!("{} <= {hi}", v.name));
                }
            }
        }
        (pv, ev, worst)
    }

    /// Plain-text listing of the canonical conic data (stacked entries,
    /// equalities and blocks before presolve).
    pub fn dump_canonical(&self) -> Result<String, LmiError> {
        let c = crate::canon::Canonical::build(self)?;
        let mut s = String::new();
        let _ = writeln!(s, "entries {}", c.n);
        for v in &self.vars {
            let _ = writeln!(
                s,
                "var {} {:?} offset {} free {}",
                v.name,
                v.kind,
                v.offset,
                v.entries.len()
            );
        }
        let _ = writeln!(s, "objective {:?}", c.obj.as_slice());
        for (r, b) in &c.eqs {
            let _ = writeln!(s, "eq {:?} = {b}", r);
        }
        for (bi, blk) in c.blocks.iter().enumerate() {
            let _ = writeln!(s, "block {bi} '{}' n={} diag={}", blk.name, blk.n, blk.diag);
            let _ = writeln!(s, "  F0 {}", blk.f0);
            for (k, ent) in &blk.coeffs {
                let _ = writeln!(s, "  y{k} {:?}", ent);
            }
        }
        Ok(s)
    }
}

#[derive(Clone, Debug)]
pub struct SolveOptions {
    pub feas_tol: f64,
    /// Relative duality gap / residual target for the interior-point phase.
    pub gap_tol: f64,
    pub max_iter: usize,
    pub verbosity: u8,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-8,
            gap_tol: 1e-9,
            max_iter: 100,
            verbosity: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Feasible,
    Infeasible,
    NumericalFailure,
}

impl SolveStatus {
    pub fn is_ok(self) -> bool {
        matches!(self, SolveStatus::Optimal | SolveStatus::Feasible)
    }
}

#[derive(Clone, Debug)]
pub struct LmiSolution {
    problem: u64,
    pub status: SolveStatus,
    values: BTreeMap<usize, DMatrix<f64>>,
    pub psd_violation: f64,
    pub eq_violation: f64,
    pub worst_constraint: Option<String>,
    pub objective: Option<f64>,
    pub iterations: usize,
    pub note: String,
}

impl LmiSolution {
    pub fn value(&self, v: &VarRef) -> DMatrix<f64> {
        assert_eq!(v.problem, self.problem, "variable from another problem");
        self.values[&v.index].clone()
    }

    pub fn scalar(&self, v: &VarRef) -> f64 {
        self.value(v)[(0, 0)]
    }

    pub fn eval(&self, e: &AffineMatrixExpr) -> DMatrix<f64> {
        e.eval(|v| self.value(v))
    }
}
