//! Canonical conic form: every free variable entry stacked into `y`, each
//! inequality written as `F0 + Σ y_k F_k ⪰ 0`, equalities as `A y = b`.
//! Presolve eliminates the equalities (`y = y0 + N z`) and removes rows whose
//! diagonal is identically zero on the affine set.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};

use crate::expr::{AffineMatrixExpr, Term};
use crate::problem::{LmiProblem, Sense, VarKind};
use crate::psd::{min_eigenvalue, symmetry_defect, DEFAULT_SYM_TOL};
use crate::LmiError;

pub(crate) type Entries = Vec<(usize, usize, f64)>;

#[derive(Clone, Debug)]
pub(crate) struct ConeBlock {
    pub name: String,
    pub n: usize,
    /// Diagonal (LP) block: `f0` is n x 1 and entries are (i, i, v).
    pub diag: bool,
    pub f0: DMatrix<f64>,
    /// Upper-triangle coefficients per variable index.
    pub coeffs: Vec<(usize, Entries)>,
    pub row_names: Vec<String>,
}

impl ConeBlock {
    pub fn scale(&self) -> f64 {
        let mut s = self.f0.amax();
        for (_, e) in &self.coeffs {
            for &(_, _, v) in e {
                s = s.max(v.abs());
            }
        }
        s
    }

    pub fn f0_at(&self, i: usize, j: usize) -> f64 {
        if self.diag {
            if i == j {
                self.f0[(i, 0)]
            } else {
                0.0
            }
        } else {
            self.f0[(i, j)]
        }
    }
}

pub(crate) struct Canonical {
    pub n: usize,
    pub obj: DVector<f64>,
    pub eqs: Vec<(Vec<(usize, f64)>, f64)>,
    pub blocks: Vec<ConeBlock>,
}

/// Coefficient matrix of free entry `(a, b)` of the term's variable.
fn term_coeff(t: &Term, kind: &VarKind, a: usize, b: usize, scalar_lr: &Option<DMatrix<f64>>) -> DMatrix<f64> {
    let outer = |i: usize, j: usize| t.left.column(i) * t.right.row(j);
    match kind {
        VarKind::Scalar => scalar_lr.clone().expect("scalar product precomputed"),
        VarKind::Symmetric(_) => {
            if a == b {
                outer(a, a)
            } else {
                outer(a, b) + outer(b, a)
            }
        }
        VarKind::Rect { .. } => {
            if t.transpose {
                outer(b, a)
            } else {
                outer(a, b)
            }
        }
    }
}

/// Calls `f(y_index, coefficient_matrix)` for every free entry that appears in `e`.
fn for_each_coeff<F>(p: &LmiProblem, e: &AffineMatrixExpr, mut f: F)
where
    F: FnMut(usize, DMatrix<f64>),
{
    let mut by_var: BTreeMap<usize, Vec<&Term>> = BTreeMap::new();
    for t in e.terms() {
        by_var.entry(t.var.index).or_default().push(t);
    }
    let (rows, cols) = e.dims();
    for (vi, terms) in by_var {
        let info = &p.vars[vi];
        let scalar_lr: Vec<Option<DMatrix<f64>>> = terms
            .iter()
            .map(|t| {
                if info.kind == VarKind::Scalar {
                    Some(&t.left * &t.right)
                } else {
                    None
                }
            })
            .collect();
        for (k, &(a, b)) in info.entries.iter().enumerate() {
            let mut m = DMatrix::zeros(rows, cols);
            for (t, lr) in terms.iter().zip(&scalar_lr) {
                m += term_coeff(t, &info.kind, a, b, lr);
            }
            f(info.offset + k, m);
        }
    }
}

fn upper_entries(m: &DMatrix<f64>) -> Entries {
    let n = m.nrows();
    let tol = 1e-14 * m.amax();
    let mut out = Vec::new();
    for j in 0..n {
        for i in 0..=j {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            if v.abs() > tol && v != 0.0 {
                out.push((i, j, v));
            }
        }
    }
    out
}

impl Canonical {
    pub fn build(p: &LmiProblem) -> Result<Self, LmiError> {
        let n = p.n_entries;
        let mut obj = DVector::zeros(n);
        if let Some(o) = &p.objective {
            for_each_coeff(p, o, |k, m| obj[k] += m[(0, 0)]);
        }
        let mut eqs = Vec::new();
        let mut blocks = Vec::new();
        let mut lp = ConeBlock {
            name: "scalar rows".into(),
            n: 0,
            diag: true,
            f0: DMatrix::zeros(0, 1),
            coeffs: Vec::new(),
            row_names: Vec::new(),
        };
        let mut lp_f0: Vec<f64> = Vec::new();
        let mut lp_coeffs: BTreeMap<usize, Entries> = BTreeMap::new();

        for c in &p.constraints {
            let (r, cc) = c.expr.dims();
            match c.sense {
                Sense::EqZero => {
                    let mut rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); r * cc];
                    for_each_coeff(p, &c.expr, |k, m| {
                        for i in 0..r {
                            for j in 0..cc {
                                if m[(i, j)] != 0.0 {
                                    rows[i * cc + j].push((k, m[(i, j)]));
                                }
                            }
                        }
                    });
                    for i in 0..r {
                        for j in 0..cc {
                            let rhs = -c.expr.constant_part()[(i, j)];
                            let row = std::mem::take(&mut rows[i * cc + j]);
                            if !row.is_empty() || rhs != 0.0 {
                                eqs.push((row, rhs));
                            }
                        }
                    }
                }
                Sense::Psd | Sense::Pd(_) => {
                    let f0 = c.expr.constant_part().clone()
                        - DMatrix::identity(r, r) * c.margin();
                    let d = symmetry_defect(&f0);
                    if d > DEFAULT_SYM_TOL {
                        return Err(LmiError::NotSymmetric(d));
                    }
                    let mut coeffs = Vec::new();
                    let mut err = None;
                    for_each_coeff(p, &c.expr, |k, m| {
                        let d = symmetry_defect(&m);
                        if d > DEFAULT_SYM_TOL {
                            err = Some(d);
                        }
                        let e = upper_entries(&m);
                        if !e.is_empty() {
                            coeffs.push((k, e));
                        }
                    });
                    if let Some(d) = err {
                        return Err(LmiError::NotSymmetric(d));
                    }
                    if r == 1 {
                        let row = lp_f0.len();
                        lp_f0.push(f0[(0, 0)]);
                        for (k, e) in coeffs {
                            lp_coeffs.entry(k).or_default().push((row, row, e[0].2));
                        }
                        lp.row_names.push(c.name.clone());
                    } else {
                        blocks.push(ConeBlock {
                            name: c.name.clone(),
                            n: r,
                            diag: false,
                            f0: crate::psd::symmetrize(&f0),
                            coeffs,
                            row_names: Vec::new(),
                        });
                    }
                }
            }
        }
        for v in &p.vars {
            if let Some(lo) = v.bounds.0 {
                let row = lp_f0.len();
                lp_f0.push(-lo);
                lp_coeffs.entry(v.offset).or_default().push((row, row, 1.0));
                lp.row_names.push(format!("{} >= {lo}", v.name));
            }
            if let Some(hi) = v.bounds.1 {
                let row = lp_f0.len();
                lp_f0.push(hi);
                lp_coeffs.entry(v.offset).or_default().push((row, row, -1.0));
                lp.row_names.push(format!("{} <= {hi}", v.name));
            }
        }
        if !lp_f0.is_empty() {
            lp.n = lp_f0.len();
            lp.f0 = DMatrix::from_column_slice(lp.n, 1, &lp_f0);
            lp.coeffs = lp_coeffs.into_iter().collect();
            blocks.push(lp);
        }
        Ok(Self { n, obj, eqs, blocks })
    }
}

/// Outcome of presolve.
pub(crate) enum Presolved {
    Reduced(Reduced),
    /// Proven infeasible during presolve, with a reason.
    Infeasible(String, DVector<f64>),
    /// Objective decreases without bound along a direction no constraint sees.
    Unbounded(String, DVector<f64>),
}

pub(crate) struct Reduced {
    pub y0: DVector<f64>,
    /// `y = y0 + nmat * z`.
    pub nmat: DMatrix<f64>,
    pub blocks: Vec<ConeBlock>,
    /// Minimization objective in z.
    pub c: DVector<f64>,
}

struct Elim {
    y0: DVector<f64>,
    nmat: DMatrix<f64>,
}

/// Reduced row echelon elimination of `A y = b`. Returns `Err` with a message
/// when the system is inconsistent.
fn eliminate(n: usize, eqs: &[(Vec<(usize, f64)>, f64)], tol: f64) -> Result<Elim, String> {
    let neq = eqs.len();
    let mut a: DMatrix<f64> = DMatrix::zeros(neq, n);
    let mut b: DVector<f64> = DVector::zeros(neq);
    for (r, (row, rhs)) in eqs.iter().enumerate() {
        for &(k, v) in row {
            a[(r, k)] += v;
        }
        b[r] = *rhs;
    }
    let mut is_pivot = vec![false; n];
    let mut pivots: Vec<(usize, usize)> = Vec::new(); // (row, col)
    let mut used_rows = vec![false; neq];
    for r in 0..neq {
        let scale = a.row(r).amax().max(b[r].abs()).max(1e-300);
        let mut best = None;
        let mut bv = 0.0;
        for j in 0..n {
            if !is_pivot[j] && a[(r, j)].abs() > bv {
                bv = a[(r, j)].abs();
                best = Some(j);
            }
        }
        let row_norm = eqs[r].0.iter().map(|x| x.1.abs()).fold(0.0, f64::max).max(1.0);
        match best {
            Some(j) if bv > tol * row_norm => {
                let piv = a[(r, j)];
                for jj in 0..n {
                    a[(r, jj)] /= piv;
                }
                b[r] /= piv;
                for rr in 0..neq {
                    if rr != r && a[(rr, j)] != 0.0 {
                        let f = a[(rr, j)];
                        for jj in 0..n {
                            let v = a[(r, jj)];
                            if v != 0.0 {
                                a[(rr, jj)] -= f * v;
                            }
                        }
                        b[rr] -= f * b[r];
                        a[(rr, j)] = 0.0;
                    }
                }
                is_pivot[j] = true;
                used_rows[r] = true;
                pivots.push((r, j));
            }
            _ => {
                if b[r].abs() > tol * scale.max(1.0) {
                    return Err(format!(
                        "equality constraints are inconsistent (residual {:.3e})",
                        b[r]
                    ));
                }
            }
        }
    }
    let free: Vec<usize> = (0..n).filter(|&j| !is_pivot[j]).collect();
    let mut nmat = DMatrix::zeros(n, free.len());
    let mut y0 = DVector::zeros(n);
    for (q, &j) in free.iter().enumerate() {
        nmat[(j, q)] = 1.0;
    }
    for &(r, j) in &pivots {
        y0[j] = b[r];
        for (q, &f) in free.iter().enumerate() {
            let v = a[(r, f)];
            if v != 0.0 {
                nmat[(j, q)] = -v;
            }
        }
    }
    Ok(Elim { y0, nmat })
}

/// Substitutes `y = y0 + N z` into a y-space block restricted to `active` rows.
fn substitute(blk: &ConeBlock, active: &[usize], el: &Elim, nz_rows: &[Vec<(usize, f64)>]) -> ConeBlock {
    let na = active.len();
    let mut pos = vec![usize::MAX; blk.n];
    for (ii, &i) in active.iter().enumerate() {
        pos[i] = ii;
    }
    let mut f0 = if blk.diag {
        DMatrix::zeros(na, 1)
    } else {
        DMatrix::zeros(na, na)
    };
    for (ii, &i) in active.iter().enumerate() {
        if blk.diag {
            f0[(ii, 0)] = blk.f0[(i, 0)];
        } else {
            for (jj, &j) in active.iter().enumerate() {
                f0[(ii, jj)] = blk.f0[(i, j)];
            }
        }
    }
    let mut acc: BTreeMap<usize, BTreeMap<(usize, usize), f64>> = BTreeMap::new();
    for (k, ents) in &blk.coeffs {
        let yk = el.y0[*k];
        for &(i, j, v) in ents {
            let (pi, pj) = (pos[i], pos[j]);
            if pi == usize::MAX || pj == usize::MAX {
                continue;
            }
            if yk != 0.0 {
                if blk.diag {
                    f0[(pi, 0)] += yk * v;
                } else {
                    f0[(pi, pj)] += yk * v;
                    if pi != pj {
                        f0[(pj, pi)] += yk * v;
                    }
                }
            }
            for &(q, w) in &nz_rows[*k] {
                *acc.entry(q).or_default().entry((pi, pj)).or_insert(0.0) += w * v;
            }
        }
    }
    let scale = blk.scale();
    let coeffs = acc
        .into_iter()
        .filter_map(|(q, m)| {
            let e: Entries = m
                .into_iter()
                .filter(|&(_, v)| v.abs() > 1e-14 * scale)
                .map(|((i, j), v)| (i, j, v))
                .collect();
            (!e.is_empty()).then_some((q, e))
        })
        .collect();
    ConeBlock {
        name: blk.name.clone(),
        n: na,
        diag: blk.diag,
        f0,
        coeffs,
        row_names: if blk.diag {
            active.iter().map(|&i| blk.row_names[i].clone()).collect()
        } else {
            Vec::new()
        },
    }
}

pub(crate) fn presolve(c: &Canonical, feas_tol: f64) -> Presolved {
    let mut eqs = c.eqs.clone();
    let mut active: Vec<Vec<usize>> = c.blocks.iter().map(|b| (0..b.n).collect()).collect();
    loop {
        let el = match eliminate(c.n, &eqs, 1e-11) {
            Ok(e) => e,
            Err(msg) => return Presolved::Infeasible(msg, DVector::zeros(c.n)),
        };
        let m = el.nmat.ncols();
        let mut nz_rows: Vec<Vec<(usize, f64)>> = vec![Vec::new(); c.n];
        for k in 0..c.n {
            for q in 0..m {
                let v = el.nmat[(k, q)];
                if v != 0.0 {
                    nz_rows[k].push((q, v));
                }
            }
        }
        let mut reduced: Vec<ConeBlock> = Vec::new();
        let mut new_eqs = Vec::new();
        let mut changed = false;
        for (bi, blk) in c.blocks.iter().enumerate() {
            let rb = substitute(blk, &active[bi], &el, &nz_rows);
            let scale = blk.scale().max(1e-300);
            let ztol = 1e-12 * scale;
            // Rows whose diagonal no variable touches.
            let mut has_var = vec![false; rb.n];
            for (_, e) in &rb.coeffs {
                for &(i, j, _) in e {
                    if i == j {
                        has_var[i] = true;
                    }
                }
            }
            let mut dead = Vec::new();
            for i in 0..rb.n {
                if has_var[i] {
                    continue;
                }
                let d = rb.f0_at(i, i);
                if d < -ztol.max(feas_tol) {
                    let row = if rb.diag {
                        rb.row_names[i].clone()
                    } else {
                        format!("row {i}")
                    };
                    return Presolved::Infeasible(
                        format!(
                            "constraint '{}' {row} has constant diagonal {d:.3e} < 0",
                            blk.name
                        ),
                        el.y0.clone(),
                    );
                }
                if rb.diag {
                    dead.push(i);
                } else if d.abs() <= ztol {
                    dead.push(i);
                }
            }
            if !dead.is_empty() && !rb.diag {
                // A zero diagonal forces the whole row to vanish.
                let orig_i: Vec<usize> = dead.iter().map(|&i| active[bi][i]).collect();
                for &oi in &orig_i {
                    for &oj in &active[bi] {
                        if oj == oi {
                            continue;
                        }
                        let (a, b) = if oi < oj { (oi, oj) } else { (oj, oi) };
                        let mut row = Vec::new();
                        for (k, e) in &blk.coeffs {
                            for &(i, j, v) in e {
                                if i == a && j == b {
                                    row.push((*k, v));
                                }
                            }
                        }
                        let rhs = -blk.f0[(a, b)];
                        if !row.is_empty() || rhs.abs() > ztol {
                            new_eqs.push((row, rhs));
                        }
                    }
                }
                active[bi].retain(|i| !orig_i.contains(i));
            } else if !dead.is_empty() {
                let orig_i: Vec<usize> = dead.iter().map(|&i| active[bi][i]).collect();
                active[bi].retain(|i| !orig_i.contains(i));
            }
            if dead.is_empty() {
                reduced.push(rb);
            } else {
                changed = true;
            }
        }
        if changed {
            eqs.extend(new_eqs);
            continue;
        }
        // Constant blocks: check and drop.
        let mut kept = Vec::new();
        for rb in reduced {
            if rb.n == 0 {
                continue;
            }
            if rb.coeffs.is_empty() {
                let lm = if rb.diag {
                    rb.f0.iter().cloned().fold(f64::INFINITY, f64::min)
                } else {
                    min_eigenvalue(&rb.f0)
                };
                if lm < -feas_tol {
                    return Presolved::Infeasible(
                        format!(
                            "constraint '{}' is constant on the feasible affine set with eigenvalue {lm:.3e}",
                            rb.name
                        ),
                        el.y0.clone(),
                    );
                }
                continue;
            }
            kept.push(rb);
        }
        let c_z = el.nmat.transpose() * &c.obj;
        // Drop z columns that no block touches.
        let mut used = vec![false; m];
        for b in &kept {
            for (q, _) in &b.coeffs {
                used[*q] = true;
            }
        }
        let scale_c = c_z.amax().max(1e-300);
        for q in 0..m {
            if !used[q] && c_z[q].abs() > 1e-12 * scale_c {
                return Presolved::Unbounded(
                    format!("objective is unbounded along a free direction (column {q})"),
                    el.y0.clone(),
                );
            }
        }
        let keep: Vec<usize> = (0..m).filter(|&q| used[q]).collect();
        let mut remap = vec![usize::MAX; m];
        for (new, &q) in keep.iter().enumerate() {
            remap[q] = new;
        }
        let nmat = el.nmat.select_columns(keep.iter());
        let c_red = DVector::from_iterator(keep.len(), keep.iter().map(|&q| c_z[q]));
        for b in &mut kept {
            for (q, _) in b.coeffs.iter_mut() {
                *q = remap[*q];
            }
        }
        return Presolved::Reduced(Reduced {
            y0: el.y0,
            nmat,
            blocks: kept,
            c: c_red,
        });
    }
}
