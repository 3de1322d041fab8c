//! Two-phase primal-dual interior-point method (HKM direction with a
//! Mehrotra predictor-corrector) on the presolved conic form
//! `maximize bᵀz s.t. S(z) = F0 + Σ z_k F_k ⪰ 0`.
//!
//! `S` is always recomputed from `z`, so every iterate is strictly feasible
//! and any returned point satisfies the inequalities up to rounding. The dual
//! matrix `X` starts infeasible and is driven onto `<F_k, X> = -b_k`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::canon::{presolve, Canonical, ConeBlock, Presolved};
use crate::problem::{LmiProblem, SolveOptions, SolveStatus};
use crate::LmiError;

pub(crate) struct RawResult {
    pub y: Vec<f64>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub note: String,
}

struct Blk {
    name: String,
    n: usize,
    diag: bool,
    f0: DMatrix<f64>,
    /// (var, full symmetric entry list) for dense blocks, (var, (i, i, v)) for diagonal ones.
    coeffs: Vec<(usize, Vec<(usize, usize, f64)>)>,
    /// For diagonal blocks: per row, the (var, value) pairs.
    rows: Vec<Vec<(usize, f64)>>,
}

impl Blk {
    fn from_cone(b: &ConeBlock) -> Self {
        let coeffs: Vec<(usize, Vec<(usize, usize, f64)>)> = b
            .coeffs
            .iter()
            .map(|(k, e)| {
                let mut full = Vec::with_capacity(2 * e.len());
                for &(i, j, v) in e {
                    full.push((i, j, v));
                    if i != j {
                        full.push((j, i, v));
                    }
                }
                (*k, full)
            })
            .collect();
        let mut out = Self {
            name: b.name.clone(),
            n: b.n,
            diag: b.diag,
            f0: b.f0.clone(),
            coeffs,
            rows: Vec::new(),
        };
        out.rebuild_rows();
        out
    }

    fn rebuild_rows(&mut self) {
        self.rows = vec![Vec::new(); if self.diag { self.n } else { 0 }];
        if self.diag {
            for (k, e) in &self.coeffs {
                for &(i, _, v) in e {
                    self.rows[i].push((*k, v));
                }
            }
        }
    }

    fn s_of(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut s = self.f0.clone();
        for (k, e) in &self.coeffs {
            let zk = z[*k];
            if zk == 0.0 {
                continue;
            }
            for &(i, j, v) in e {
                if self.diag {
                    s[(i, 0)] += zk * v;
                } else {
                    s[(i, j)] += zk * v;
                }
            }
        }
        s
    }

    fn dir_of(&self, dz: &DVector<f64>) -> DMatrix<f64> {
        let mut s = if self.diag {
            DMatrix::zeros(self.n, 1)
        } else {
            DMatrix::zeros(self.n, self.n)
        };
        for (k, e) in &self.coeffs {
            let d = dz[*k];
            for &(i, j, v) in e {
                if self.diag {
                    s[(i, 0)] += d * v;
                } else {
                    s[(i, j)] += d * v;
                }
            }
        }
        s
    }

    /// `<F_k, G>` (`tr(F_k G)`) for every variable of the block, accumulated into `out`.
    fn inner_into(&self, g: &DMatrix<f64>, out: &mut DVector<f64>, sign: f64) {
        for (k, e) in &self.coeffs {
            let mut acc = 0.0;
            for &(i, j, v) in e {
                acc += if self.diag { v * g[(i, 0)] } else { v * g[(j, i)] };
            }
            out[*k] += sign * acc;
        }
    }

    fn identity_like(&self, a: f64) -> DMatrix<f64> {
        if self.diag {
            DMatrix::from_element(self.n, 1, a)
        } else {
            DMatrix::identity(self.n, self.n) * a
        }
    }
}

fn dot(diag: bool, a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    if diag {
        a.dot(b)
    } else {
        a.component_mul(b).sum()
    }
}

fn min_eig(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym).eigenvalues.min()
}

/// Largest `α` with `S + α ΔS ⪰ 0` given `S = L Lᵀ`.
fn max_step(diag: bool, s: &DMatrix<f64>, chol: Option<&Cholesky<f64, Dyn>>, ds: &DMatrix<f64>) -> f64 {
    if diag {
        let mut a = f64::INFINITY;
        for i in 0..s.nrows() {
            if ds[(i, 0)] < 0.0 {
                a = a.min(-s[(i, 0)] / ds[(i, 0)]);
            }
        }
        a
    } else {
        let l = chol.expect("dense block has a factor").l();
        let linv_ds = l.solve_lower_triangular(ds).expect("triangular");
        let w = l
            .solve_lower_triangular(&linv_ds.transpose())
            .expect("triangular");
        let lm = min_eig(&w);
        if lm >= 0.0 {
            f64::INFINITY
        } else {
            -1.0 / lm
        }
    }
}

#[derive(Debug, PartialEq)]
enum Exit {
    Converged,
    EarlyStop,
    MaxIter,
    Stalled,
    Unbounded,
}

struct IpmOut {
    z: DVector<f64>,
    exit: Exit,
    iterations: usize,
    gap: f64,
    resid: f64,
}

struct Factor {
    s: DMatrix<f64>,
    chol: Option<Cholesky<f64, Dyn>>,
    sinv: DMatrix<f64>,
}

fn factor(b: &Blk, z: &DVector<f64>) -> Option<Factor> {
    let s = b.s_of(z);
    if b.diag {
        if s.iter().any(|&v| !(v > 0.0)) {
            return None;
        }
        let sinv = s.map(|v| 1.0 / v);
        Some(Factor { s, chol: None, sinv })
    } else {
        let ch = Cholesky::new(s.clone())?;
        let sinv = ch.inverse();
        let sinv = (&sinv + sinv.transpose()) * 0.5;
        Some(Factor {
            s,
            chol: Some(ch),
            sinv,
        })
    }
}

fn schur(blocks: &[Blk], xs: &[DMatrix<f64>], fs: &[Factor], m: usize) -> DMatrix<f64> {
    let mut mm = DMatrix::zeros(m, m);
    for ((b, x), f) in blocks.iter().zip(xs).zip(fs) {
        if b.diag {
            for (i, row) in b.rows.iter().enumerate() {
                let w = x[(i, 0)] * f.sinv[(i, 0)];
                for (p, &(k, vk)) in row.iter().enumerate() {
                    for &(l, vl) in &row[p..] {
                        let add = w * vk * vl;
                        mm[(k, l)] += add;
                        if k != l {
                            mm[(l, k)] += add;
                        }
                    }
                }
            }
        } else {
            let sinv = &f.sinv;
            for (p, (k, ek)) in b.coeffs.iter().enumerate() {
                for (l, el) in &b.coeffs[p..] {
                    let mut acc = 0.0;
                    for &(a, bb, v) in ek {
                        for &(c, d, w) in el {
                            acc += v * w * x[(bb, c)] * sinv[(d, a)];
                        }
                    }
                    mm[(*k, *l)] += acc;
                    if k != l {
                        mm[(*l, *k)] += acc;
                    }
                }
            }
        }
    }
    mm
}

enum Solver {
    Chol(Cholesky<f64, Dyn>),
    Lu(nalgebra::LU<f64, Dyn, Dyn>),
}

impl Solver {
    fn new(mut m: DMatrix<f64>) -> Option<Self> {
        if let Some(c) = Cholesky::new(m.clone()) {
            return Some(Solver::Chol(c));
        }
        let d = m.diagonal().amax().max(1e-300);
        for i in 0..m.nrows() {
            m[(i, i)] += 1e-12 * d;
        }
        if let Some(c) = Cholesky::new(m.clone()) {
            return Some(Solver::Chol(c));
        }
        let lu = m.lu();
        lu.is_invertible().then_some(Solver::Lu(lu))
    }

    fn solve(&self, r: &DVector<f64>) -> Option<DVector<f64>> {
        match self {
            Solver::Chol(c) => Some(c.solve(r)),
            Solver::Lu(l) => l.solve(r),
        }
    }
}

/// Maximizes `bᵀz` from a strictly feasible `z0`.
fn ipm<F>(blocks: &[Blk], b: &DVector<f64>, z0: DVector<f64>, opts: &SolveOptions, tol: f64, early: F) -> IpmOut
where
    F: Fn(&DVector<f64>) -> bool,
{
    let m = b.len();
    let ntot: usize = blocks.iter().map(|b| b.n).sum();
    let mut z = z0;
    let mut xs: Vec<DMatrix<f64>> = blocks
        .iter()
        .map(|bl| bl.identity_like(10f64.max((bl.n as f64).sqrt())))
        .collect();
    let bnorm = 1.0 + b.amax();
    let mut stall = 0;
    let mut gap = f64::INFINITY;
    let mut resid = f64::INFINITY;
    let tau = 0.95;
    for it in 0..opts.max_iter {
        let fs: Vec<Factor> = match blocks.iter().map(|bl| factor(bl, &z)).collect() {
            Some(f) => f,
            None => {
                return IpmOut { z, exit: Exit::Stalled, iterations: it, gap, resid };
            }
        };
        // Dual residual r_k = -b_k - <F_k, X>.
        let mut r = -b.clone();
        for (bl, x) in blocks.iter().zip(&xs) {
            bl.inner_into(x, &mut r, -1.0);
        }
        let xs_dot: f64 = blocks
            .iter()
            .zip(&xs)
            .zip(&fs)
            .map(|((bl, x), f)| dot(bl.diag, x, &f.s))
            .sum();
        let mu = xs_dot / ntot as f64;
        let pobj = b.dot(&z);
        gap = xs_dot / (1.0 + pobj.abs());
        resid = r.amax() / bnorm;
        if opts.verbosity > 1 {
            eprintln!("  it {it:3} obj {pobj:+.9e} gap {gap:.2e} res {resid:.2e} mu {mu:.2e}");
        }
        if early(&z) {
            return IpmOut { z, exit: Exit::EarlyStop, iterations: it, gap, resid };
        }
        if gap <= tol && resid <= tol {
            return IpmOut { z, exit: Exit::Converged, iterations: it, gap, resid };
        }
        if z.amax() > 1e13 {
            return IpmOut { z, exit: Exit::Unbounded, iterations: it, gap, resid };
        }
        let mmat = schur(blocks, &xs, &fs, m);
        let Some(solver) = Solver::new(mmat) else {
            return IpmOut { z, exit: Exit::Stalled, iterations: it, gap, resid };
        };

        // Direction for a given complementarity target R (per block).
        let direction = |rc: &[DMatrix<f64>]| -> Option<(DVector<f64>, Vec<DMatrix<f64>>, Vec<DMatrix<f64>>)> {
            let mut rhs = -r.clone();
            let mut gs = Vec::with_capacity(blocks.len());
            for ((bl, f), rcb) in blocks.iter().zip(&fs).zip(rc) {
                let g = if bl.diag {
                    rcb.component_mul(&f.sinv)
                } else {
                    rcb * &f.sinv
                };
                bl.inner_into(&g, &mut rhs, 1.0);
                gs.push(g);
            }
            let dz = solver.solve(&rhs)?;
            let mut dss = Vec::with_capacity(blocks.len());
            let mut dxs = Vec::with_capacity(blocks.len());
            for (((bl, f), x), g) in blocks.iter().zip(&fs).zip(&xs).zip(&gs) {
                let ds = bl.dir_of(&dz);
                let dx = if bl.diag {
                    g - x.component_mul(&ds).component_mul(&f.sinv)
                } else {
                    let t = g - x * &ds * &f.sinv;
                    (&t + t.transpose()) * 0.5
                };
                dss.push(ds);
                dxs.push(dx);
            }
            Some((dz, dss, dxs))
        };
        let steps = |dss: &[DMatrix<f64>], dxs: &[DMatrix<f64>]| -> Option<(f64, f64)> {
            let mut ap = f64::INFINITY;
            let mut ad = f64::INFINITY;
            for (((bl, f), x), (ds, dx)) in blocks.iter().zip(&fs).zip(&xs).zip(dss.iter().zip(dxs)) {
                ap = ap.min(max_step(bl.diag, &f.s, f.chol.as_ref(), ds));
                if bl.diag {
                    ad = ad.min(max_step(true, x, None, dx));
                } else {
                    let cx = Cholesky::new(x.clone())?;
                    ad = ad.min(max_step(false, x, Some(&cx), dx));
                }
            }
            Some((ap, ad))
        };

        let ra: Vec<DMatrix<f64>> = blocks
            .iter()
            .zip(&xs)
            .zip(&fs)
            .map(|((bl, x), f)| if bl.diag { -x.component_mul(&f.s) } else { -(x * &f.s) })
            .collect();
        let Some((_, dsa, dxa)) = direction(&ra) else {
            return IpmOut { z, exit: Exit::Stalled, iterations: it, gap, resid };
        };
        let Some((ap, ad)) = steps(&dsa, &dxa) else {
            return IpmOut { z, exit: Exit::Stalled, iterations: it, gap, resid };
        };
        let (ap, ad) = (ap.min(1.0), ad.min(1.0));
        let mut mu_aff = 0.0;
        for (((bl, x), f), (ds, dx)) in blocks.iter().zip(&xs).zip(&fs).zip(dsa.iter().zip(&dxa)) {
            let xn = x + dx * ad;
            let sn = &f.s + ds * ap;
            mu_aff += dot(bl.diag, &xn, &sn);
        }
        mu_aff /= ntot as f64;
        let sigma = (mu_aff / mu).clamp(0.0, 1.0).powi(3);
        let rc: Vec<DMatrix<f64>> = blocks
            .iter()
            .zip(&xs)
            .zip(&fs)
            .zip(dsa.iter().zip(&dxa))
            .map(|(((bl, x), f), (ds, dx))| {
                if bl.diag {
                    bl.identity_like(sigma * mu) - x.component_mul(&f.s) - dx.component_mul(ds)
                } else {
                    bl.identity_like(sigma * mu) - x * &f.s - dx * ds
                }
            })
            .collect();
        let Some((dz, dss, dxs)) = direction(&rc) else {
            return IpmOut { z, exit: Exit::Stalled, iterations: it, gap, resid };
        };
        let Some((ap, ad)) = steps(&dss, &dxs) else {
            return IpmOut { z, exit: Exit::Stalled, iterations: it, gap, resid };
        };
        let mut ap = (tau * ap).min(1.0);
        let ad = (tau * ad).min(1.0);
        // Guard against rounding pushing S out of the cone.
        let mut znew = &z + &dz * ap;
        let mut tries = 0;
        while blocks.iter().any(|bl| factor(bl, &znew).is_none()) && tries < 30 {
            ap *= 0.5;
            znew = &z + &dz * ap;
            tries += 1;
        }
        if tries == 30 {
            return IpmOut { z, exit: Exit::Stalled, iterations: it, gap, resid };
        }
        z = znew;
        for (x, dx) in xs.iter_mut().zip(&dxs) {
            *x += dx * ad;
        }
        if ap < 1e-9 && ad < 1e-9 {
            stall += 1;
            if stall >= 3 {
                return IpmOut { z, exit: Exit::Stalled, iterations: it + 1, gap, resid };
            }
        } else {
            stall = 0;
        }
    }
    IpmOut { z, exit: Exit::MaxIter, iterations: opts.max_iter, gap, resid }
}

/// Symmetric row equilibration of every block followed by column scaling of
/// the variables. Returns per-variable column factors (`z_orig = z_scaled / col`).
fn scale(blocks: &mut [Blk], m: usize) -> DVector<f64> {
    for bl in blocks.iter_mut() {
        for _ in 0..2 {
            let mut r = vec![0.0f64; bl.n];
            for i in 0..bl.n {
                if bl.diag {
                    r[i] = bl.f0[(i, 0)].abs();
                } else {
                    r[i] = bl.f0.row(i).amax();
                }
            }
            for (_, e) in &bl.coeffs {
                for &(i, _, v) in e {
                    r[i] = r[i].max(v.abs());
                }
            }
            let d: Vec<f64> = r
                .iter()
                .map(|&x| if x > 0.0 { if bl.diag { 1.0 / x } else { 1.0 / x.sqrt() } } else { 1.0 })
                .collect();
            for i in 0..bl.n {
                if bl.diag {
                    bl.f0[(i, 0)] *= d[i];
                } else {
                    for j in 0..bl.n {
                        bl.f0[(i, j)] *= d[i] * d[j];
                    }
                }
            }
            for (_, e) in bl.coeffs.iter_mut() {
                for (i, j, v) in e.iter_mut() {
                    *v *= if bl.diag { d[*i] } else { d[*i] * d[*j] };
                }
            }
            if bl.diag {
                break;
            }
        }
    }
    let mut col = DVector::from_element(m, 0.0f64);
    for bl in blocks.iter() {
        for (k, e) in &bl.coeffs {
            for &(_, _, v) in e {
                col[*k] = col[*k].max(v.abs());
            }
        }
    }
    for c in col.iter_mut() {
        if *c == 0.0 {
            *c = 1.0;
        }
    }
    for bl in blocks.iter_mut() {
        for (k, e) in bl.coeffs.iter_mut() {
            for (_, _, v) in e.iter_mut() {
                *v /= col[*k];
            }
        }
        bl.rebuild_rows();
    }
    col
}

pub(crate) fn solve_problem(p: &LmiProblem, opts: &SolveOptions) -> Result<RawResult, LmiError> {
    let canon = Canonical::build(p)?;
    let red = match presolve(&canon, opts.feas_tol) {
        Presolved::Infeasible(note, y) => {
            return Ok(RawResult { y: y.as_slice().to_vec(), status: SolveStatus::Infeasible, iterations: 0, note });
        }
        Presolved::Unbounded(note, y) => {
            return Ok(RawResult { y: y.as_slice().to_vec(), status: SolveStatus::NumericalFailure, iterations: 0, note });
        }
        Presolved::Reduced(r) => r,
    };
    let m = red.nmat.ncols();
    let to_y = |zs: &DVector<f64>, col: &DVector<f64>| -> Vec<f64> {
        let z = zs.component_div(col);
        (&red.y0 + &red.nmat * z).as_slice().to_vec()
    };
    if red.blocks.is_empty() || m == 0 {
        return Ok(RawResult {
            y: red.y0.as_slice().to_vec(),
            status: if p.has_objective() { SolveStatus::Optimal } else { SolveStatus::Feasible },
            iterations: 0,
            note: "solved in presolve".into(),
        });
    }
    let mut blocks: Vec<Blk> = red.blocks.iter().map(Blk::from_cone).collect();
    let col = scale(&mut blocks, m);
    let mut c = red.c.component_div(&col);
    let cmax = c.amax();
    if cmax > 0.0 {
        c /= cmax;
    }

    // Phase I: maximize t subject to S(z) - tI ⪰ 0, t <= t_cap.
    let lmin0 = blocks
        .iter()
        .map(|bl| if bl.diag { bl.f0.min() } else { min_eig(&bl.f0) })
        .fold(f64::INFINITY, f64::min);
    let mut iterations = 0;
    let mut z0 = DVector::zeros(m);
    let mut note = String::new();
    let need_phase1 = lmin0 < 1e-3 || !p.has_objective() && lmin0 < 0.0;
    if need_phase1 {
        let t_cap = 1.0;
        let mut pb: Vec<Blk> = blocks
            .iter()
            .map(|bl| {
                let mut nb = Blk {
                    name: bl.name.clone(),
                    n: bl.n,
                    diag: bl.diag,
                    f0: bl.f0.clone(),
                    coeffs: bl.coeffs.clone(),
                    rows: Vec::new(),
                };
                nb.coeffs.push((m, (0..bl.n).map(|i| (i, i, -1.0)).collect()));
                nb.rebuild_rows();
                nb
            })
            .collect();
        let mut cap = Blk {
            name: "phase-one cap".into(),
            n: 1,
            diag: true,
            f0: DMatrix::from_element(1, 1, t_cap),
            coeffs: vec![(m, vec![(0, 0, -1.0)])],
            rows: Vec::new(),
        };
        cap.rebuild_rows();
        pb.push(cap);
        let mut bt = DVector::zeros(m + 1);
        bt[m] = 1.0;
        let mut zt = DVector::zeros(m + 1);
        zt[m] = lmin0.min(t_cap) - 1.0;
        let has_obj = p.has_objective();
        let out = ipm(&pb, &bt, zt, opts, 1e-9, |z| has_obj && z[m] >= 0.25 * t_cap || !has_obj && z[m] >= 1e-3);
        iterations += out.iterations;
        let t = out.z[m];
        let zf = out.z.rows(0, m).into_owned();
        if opts.verbosity > 0 {
            eprintln!("phase I: t* = {t:.3e} after {} iterations ({:?})", out.iterations, out.exit);
        }
        if t <= 0.0 {
            let (worst, lm) = blocks
                .iter()
                .map(|bl| {
                    let s = bl.s_of(&zf);
                    (bl.name.clone(), if bl.diag { s.min() } else { min_eig(&s) })
                })
                .fold((String::new(), f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a });
            let converged = matches!(out.exit, Exit::Converged);
            let status = if t < -opts.feas_tol && (converged || out.exit == Exit::Stalled && t < -1e-6) {
                SolveStatus::Infeasible
            } else if t < -opts.feas_tol {
                SolveStatus::NumericalFailure
            } else {
                SolveStatus::Feasible
            };
            let note = format!(
                "phase I optimum t* = {t:.3e} (scaled, {:?}); most violated constraint '{worst}' (λmin {lm:.3e})",
                out.exit
            );
            return Ok(RawResult { y: to_y(&zf, &col), status, iterations, note });
        }
        if !p.has_objective() {
            return Ok(RawResult {
                y: to_y(&zf, &col),
                status: SolveStatus::Feasible,
                iterations,
                note: format!("strictly feasible with scaled margin {t:.3e}"),
            });
        }
        z0 = zf;
    } else if !p.has_objective() {
        return Ok(RawResult {
            y: to_y(&z0, &col),
            status: SolveStatus::Feasible,
            iterations,
            note: "constant part already feasible".into(),
        });
    }

    let b = -c;
    let out = ipm(&blocks, &b, z0, opts, opts.gap_tol, |_| false);
    iterations += out.iterations;
    let status = match out.exit {
        Exit::Converged => SolveStatus::Optimal,
        Exit::Unbounded => {
            note = "objective appears unbounded (iterates diverge)".into();
            SolveStatus::NumericalFailure
        }
        Exit::MaxIter => {
            note = format!(
                "iteration cap reached (gap {:.2e}, residual {:.2e})",
                out.gap, out.resid
            );
            SolveStatus::NumericalFailure
        }
        Exit::Stalled | Exit::EarlyStop => {
            if out.gap <= 1e-6 && out.resid <= 1e-6 {
                note = format!("stalled near optimum (gap {:.2e}, residual {:.2e})", out.gap, out.resid);
                SolveStatus::Optimal
            } else {
                note = format!(
                    "stalled; point is feasible but optimality is not certified (gap {:.2e}, residual {:.2e})",
                    out.gap, out.resid
                );
                SolveStatus::Feasible
            }
        }
    };
    Ok(RawResult { y: to_y(&out.z, &col), status, iterations, note })
}
