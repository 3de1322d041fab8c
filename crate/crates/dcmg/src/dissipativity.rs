//! Equilibrium-independent dissipativity of LTI subsystems and networks.
//!
//! Supply rates are quadratic forms in `(u, y)`:
//! `s(u, y) = uᵀX11u + 2uᵀX12y + yᵀX22y`.

use lmi_core::{AffineMatrixExpr as Expr, LmiProblem, SolveOptions, VarRef};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::{block_diag, coupling_matrices, network_io, InterconnectionMatrix, LineParams, MicrogridSpec};
use crate::{solve_checked, DcmgError, Solved};

#[derive(Debug, Clone, PartialEq)]
pub struct SupplyRate {
    pub x11: DMatrix<f64>,
    pub x12: DMatrix<f64>,
    pub x21: DMatrix<f64>,
    pub x22: DMatrix<f64>,
}

impl SupplyRate {
    pub fn new(x11: DMatrix<f64>, x12: DMatrix<f64>, x22: DMatrix<f64>) -> Result<Self, DcmgError> {
        let (m, p) = (x11.nrows(), x22.nrows());
        if x11.ncols() != m || x22.ncols() != p || x12.shape() != (m, p) {
            return Err(DcmgError::Invalid("supply rate blocks do not conform".into()));
        }
        let asym = (&x11 - x11.transpose()).amax().max((&x22 - x22.transpose()).amax());
        if asym > 1e-12 {
            return Err(DcmgError::Invalid("supply rate diagonal blocks must be symmetric".into()));
        }
        let x21 = x12.transpose();
        Ok(SupplyRate { x11, x12, x21, x22 })
    }

    /// `s = uᵀy`.
    pub fn passive(n: usize) -> Self {
        Self::if_ofp(0.0, 0.0, n)
    }

    /// Input-feedforward / output-feedback passivity: `uᵀy - ν|u|² - ρ|y|²`.
    pub fn if_ofp(nu: f64, rho: f64, n: usize) -> Self {
        let i = DMatrix::<f64>::identity(n, n);
        SupplyRate { x11: &i * -nu, x12: &i * 0.5, x21: &i * 0.5, x22: &i * -rho }
    }

    /// `γ²|u|² - |y|²`.
    pub fn l2_gain(gamma: f64, m: usize, p: usize) -> Self {
        SupplyRate {
            x11: DMatrix::identity(m, m) * gamma * gamma,
            x12: DMatrix::zeros(m, p),
            x21: DMatrix::zeros(p, m),
            x22: -DMatrix::identity(p, p),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.x11.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.x22.nrows()
    }

    /// The full symmetric matrix over `(u, y)`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let (m, p) = (self.input_dim(), self.output_dim());
        let mut x = DMatrix::zeros(m + p, m + p);
        x.view_mut((0, 0), (m, m)).copy_from(&self.x11);
        x.view_mut((0, m), (m, p)).copy_from(&self.x12);
        x.view_mut((m, 0), (p, m)).copy_from(&self.x21);
        x.view_mut((m, m), (p, p)).copy_from(&self.x22);
        x
    }

    pub fn eval(&self, u: &DVector<f64>, y: &DVector<f64>) -> f64 {
        (u.transpose() * &self.x11 * u)[(0, 0)]
            + 2.0 * (u.transpose() * &self.x12 * y)[(0, 0)]
            + (y.transpose() * &self.x22 * y)[(0, 0)]
    }

    /// `(ν, ρ)` when the rate has the IF-OFP shape.
    pub fn indices(&self) -> Option<(f64, f64)> {
        let n = self.input_dim();
        if self.output_dim() != n || n == 0 {
            return None;
        }
        let nu = -self.x11[(0, 0)];
        let rho = -self.x22[(0, 0)];
        let i = DMatrix::<f64>::identity(n, n);
        let same = |a: &DMatrix<f64>, b: DMatrix<f64>| (a - b).amax() <= 1e-14 * (1.0 + a.amax());
        (same(&self.x11, &i * -nu) && same(&self.x12, &i * 0.5) && same(&self.x22, &i * -rho))
            .then_some((nu, rho))
    }

    fn is_neg_def(m: &DMatrix<f64>) -> bool {
        m.nrows() == 0 || m.clone().symmetric_eigenvalues().max() < 0.0
    }

    fn is_pos_def(m: &DMatrix<f64>) -> bool {
        m.nrows() == 0 || m.clone().symmetric_eigenvalues().min() > 0.0
    }
}

/// A storage function `xᵀPx` certifying a supply rate.
#[derive(Debug, Clone, PartialEq)]
pub struct PassivityCertificate {
    pub supply: SupplyRate,
    pub storage: DMatrix<f64>,
    /// Local state feedback that achieves the rate, if synthesized.
    pub gain: Option<DMatrix<f64>>,
}

impl PassivityCertificate {
    pub fn nu(&self) -> Option<f64> {
        self.supply.indices().map(|x| x.0)
    }

    pub fn rho(&self) -> Option<f64> {
        self.supply.indices().map(|x| x.1)
    }
}

/// Serializable summary of one subsystem's indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Indices {
    pub nu: f64,
    pub rho: f64,
}

/// Result of an analysis that may fail to find a certificate.
#[derive(Debug, Clone)]
pub enum Analysis<T> {
    Certified(T),
    /// No certificate exists up to solver tolerance (or, for sufficient-only
    /// tests, none was found).
    NotCertified(String),
}

impl<T> Analysis<T> {
    pub fn certified(self) -> Option<T> {
        match self {
            Analysis::Certified(t) => Some(t),
            Analysis::NotCertified(_) => None,
        }
    }

    pub fn is_certified(&self) -> bool {
        matches!(self, Analysis::Certified(_))
    }
}

fn c(m: DMatrix<f64>) -> Expr {
    Expr::constant(m)
}

/// Options shared by the analysis and synthesis routines.
#[derive(Debug, Clone)]
pub struct LmiSettings {
    /// Margin used for strict inequalities.
    pub eps: f64,
    pub solver: SolveOptions,
}

impl Default for LmiSettings {
    fn default() -> Self {
        LmiSettings { eps: 1e-6, solver: SolveOptions::default() }
    }
}

fn dissipation_block(
    p: &Expr,
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cm: &DMatrix<f64>,
    d: &DMatrix<f64>,
    x: &SupplyRate,
) -> Result<Expr, DcmgError> {
    let (n, m) = (a.nrows(), b.ncols());
    let tl = -(p.rmul(a).he()) + c(cm.transpose() * &x.x22 * cm);
    let tr = -(p.rmul(b)) + c(cm.transpose() * &x.x21 + cm.transpose() * &x.x22 * d);
    let br = c(&x.x11 + &x.x12 * d + d.transpose() * &x.x21 + d.transpose() * &x.x22 * d);
    Ok(Expr::block(
        &[vec![Some(tl), Some(tr.clone())], vec![Some(tr.transpose()), Some(br)]],
        &[n, m],
        &[n, m],
    )?)
}

fn check_system(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cm: &DMatrix<f64>,
    d: &DMatrix<f64>,
    x: &SupplyRate,
) -> Result<(), DcmgError> {
    let n = a.nrows();
    let ok = a.ncols() == n
        && b.nrows() == n
        && cm.ncols() == n
        && d.nrows() == cm.nrows()
        && d.ncols() == b.ncols()
        && x.input_dim() == b.ncols()
        && x.output_dim() == cm.nrows();
    if ok {
        Ok(())
    } else {
        Err(DcmgError::Invalid("system matrices and supply rate do not conform".into()))
    }
}

/// Searches for `P > 0` certifying `X`-dissipativity of `(A, B, C, D)`.
pub fn analyze_xeid(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cm: &DMatrix<f64>,
    d: &DMatrix<f64>,
    x: &SupplyRate,
    settings: &LmiSettings,
) -> Result<Analysis<PassivityCertificate>, DcmgError> {
    check_system(a, b, cm, d, x)?;
    let n = a.nrows();
    let mut prob = LmiProblem::new();
    let pv = prob.symmetric("P", n);
    let p = Expr::var(pv);
    prob.pd("P > 0", p.clone(), settings.eps)?;
    prob.psd("dissipation", dissipation_block(&p, a, b, cm, d, x)?)?;
    match solve_checked(&prob, &settings.solver, "X-EID analysis")? {
        Solved::Ok(sol) => Ok(Analysis::Certified(PassivityCertificate {
            supply: x.clone(),
            storage: sol.value(&pv),
            gain: None,
        })),
        Solved::Infeasible(note) => Ok(Analysis::NotCertified(note)),
    }
}

/// Largest `ρ` for which `(A, B, C, D)` is IF-OFP(`nu`, ρ), and the storage.
pub fn max_output_index(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cm: &DMatrix<f64>,
    d: &DMatrix<f64>,
    nu: f64,
    rho_cap: Option<f64>,
    settings: &LmiSettings,
) -> Result<Analysis<PassivityCertificate>, DcmgError> {
    let m = b.ncols();
    check_system(a, b, cm, d, &SupplyRate::if_ofp(nu, 0.0, m))?;
    let n = a.nrows();
    let mut prob = LmiProblem::new();
    let pv = prob.symmetric("P", n);
    let rv = prob.scalar_bounded("rho", None, rho_cap);
    let p = Expr::var(pv);
    prob.pd("P > 0", p.clone(), settings.eps)?;
    let base = SupplyRate::if_ofp(nu, 0.0, m);
    let blk = dissipation_block(&p, a, b, cm, d, &base)?;
    // ρ enters as -ρ [C D]ᵀ[C D].
    let mut cd = DMatrix::zeros(cm.nrows(), n + m);
    cd.view_mut((0, 0), (cm.nrows(), n)).copy_from(cm);
    cd.view_mut((0, n), (cm.nrows(), m)).copy_from(d);
    let rho_block = Expr::scaled(rv, cd.transpose() * cd);
    prob.psd("dissipation", blk - rho_block)?;
    prob.maximize(Expr::var(rv))?;
    match solve_checked(&prob, &settings.solver, "index maximization")? {
        Solved::Ok(sol) => {
            let rho = sol.scalar(&rv);
            Ok(Analysis::Certified(PassivityCertificate {
                supply: SupplyRate::if_ofp(nu, rho, m),
                storage: sol.value(&pv),
                gain: None,
            }))
        }
        Solved::Infeasible(note) => Ok(Analysis::NotCertified(note)),
    }
}

/// Best IF-OFP indices: maximize ρ at the given ν, then the largest ν that
/// keeps that ρ (lexicographic two-solve).
pub fn best_indices(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    cm: &DMatrix<f64>,
    d: &DMatrix<f64>,
    nu: f64,
    settings: &LmiSettings,
) -> Result<Analysis<PassivityCertificate>, DcmgError> {
    let first = match max_output_index(a, b, cm, d, nu, None, settings)? {
        Analysis::Certified(c) => c,
        other => return Ok(other),
    };
    let rho = first.rho().expect("IF-OFP rate") * (1.0 - 1e-7);
    let m = b.ncols();
    let n = a.nrows();
    let mut prob = LmiProblem::new();
    let pv = prob.symmetric("P", n);
    let nv = prob.scalar("nu");
    let p = Expr::var(pv);
    prob.pd("P > 0", p.clone(), settings.eps)?;
    let blk = dissipation_block(&p, a, b, cm, d, &SupplyRate::if_ofp(0.0, rho, m))?;
    let mut e_in = DMatrix::zeros(n + m, n + m);
    e_in.view_mut((n, n), (m, m)).fill_with_identity();
    prob.psd("dissipation", blk - Expr::scaled(nv, e_in))?;
    prob.maximize(Expr::var(nv))?;
    match solve_checked(&prob, &settings.solver, "index maximization")? {
        Solved::Ok(sol) => Ok(Analysis::Certified(PassivityCertificate {
            supply: SupplyRate::if_ofp(sol.scalar(&nv), rho, m),
            storage: sol.value(&pv),
            gain: None,
        })),
        Solved::Infeasible(_) => Ok(Analysis::Certified(first)),
    }
}

/// A state-feedback gain `L` with `A + BL` dissipative from an additive
/// state input to the full state.
#[derive(Debug, Clone)]
pub struct LocalSynthesis {
    pub gain: DMatrix<f64>,
    /// The LMI variable; the storage matrix is its inverse.
    pub p: DMatrix<f64>,
    pub certificate: PassivityCertificate,
}

/// The three-block synthesis matrix in `(P, K)` for supply blocks given as
/// expressions (so indices may be decision variables).
pub(crate) fn synthesis_block(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    p: &Expr,
    k: &Expr,
    neg_x22_inv: Expr,
    x21: &DMatrix<f64>,
    x11: Expr,
) -> Result<Expr, DcmgError> {
    let n = a.nrows();
    let i = DMatrix::<f64>::identity(n, n);
    let apbk = p.lmul(a) + k.lmul(b);
    let off = p.rmul(x21) - c(i);
    Ok(Expr::block(
        &[
            vec![Some(neg_x22_inv), Some(p.clone()), None],
            vec![Some(p.clone()), Some(-apbk.he()), Some(off.clone())],
            vec![None, Some(off.transpose()), Some(x11)],
        ],
        &[n, n, n],
        &[n, n, n],
    )?)
}

/// Synthesizes `L = K P⁻¹` making `ẋ = (A + BL)x + u, y = x` X-dissipative.
pub fn synthesize_local_xeid(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x: &SupplyRate,
    settings: &LmiSettings,
) -> Result<Analysis<LocalSynthesis>, DcmgError> {
    let n = a.nrows();
    if a.ncols() != n || b.nrows() != n || x.input_dim() != n || x.output_dim() != n {
        return Err(DcmgError::Invalid("synthesis needs a square supply rate over the state".into()));
    }
    if !SupplyRate::is_neg_def(&x.x22) {
        return Err(DcmgError::Invalid("synthesis needs X22 negative definite".into()));
    }
    let inv = x.x22.clone().try_inverse().ok_or_else(|| DcmgError::Invalid("X22 is singular".into()))?;
    let mut prob = LmiProblem::new();
    let pv = prob.symmetric("P", n);
    let kv = prob.rect("K", b.ncols(), n);
    let p = Expr::var(pv);
    prob.pd("P > 0", p.clone(), settings.eps)?;
    let blk = synthesis_block(a, b, &p, &Expr::var(kv), c(-inv), &x.x21, c(x.x11.clone()))?;
    prob.pd("synthesis", blk, settings.eps)?;
    match solve_checked(&prob, &settings.solver, "local synthesis")? {
        Solved::Ok(sol) => {
            let pm = sol.value(&pv);
            let pinv = pm.clone().try_inverse().ok_or_else(|| DcmgError::Numerical {
                stage: "local synthesis",
                note: "returned P is singular".into(),
            })?;
            let gain = sol.value(&kv) * &pinv;
            Ok(Analysis::Certified(LocalSynthesis {
                gain: gain.clone(),
                p: pm,
                certificate: PassivityCertificate { supply: x.clone(), storage: pinv, gain: Some(gain) },
            }))
        }
        Solved::Infeasible(note) => Ok(Analysis::NotCertified(format!(
            "no gain achieves the requested supply rate {:?}: {note}",
            x.indices()
        ))),
    }
}

/// Line indices at `ν̄ = 0`: `ρ̄ = R`, storage `L/2`.
pub fn line_passivity_closed_form(r_l: f64, l_l: f64) -> Result<PassivityCertificate, DcmgError> {
    if !(r_l > 0.0 && l_l > 0.0) {
        return Err(DcmgError::Invalid("line resistance and inductance must be positive".into()));
    }
    Ok(PassivityCertificate {
        supply: SupplyRate::if_ofp(0.0, r_l, 1),
        storage: DMatrix::from_element(1, 1, l_l / 2.0),
        gain: None,
    })
}

/// The 2x2 line dissipation matrix as an expression in `(P̄, ν̄, ρ̄)`.
pub(crate) fn line_block(line: &LineParams, p: &Expr, nu: &Expr, rho: &Expr) -> Result<Expr, DcmgError> {
    let tl = p.scale(2.0 * line.r_l / line.l_l) - rho.clone();
    let tr = p.scale(-1.0 / line.l_l) + c(DMatrix::from_element(1, 1, 0.5));
    Ok(Expr::block(
        &[vec![Some(tl), Some(tr.clone())], vec![Some(tr), Some(-nu.clone())]],
        &[1, 1],
        &[1, 1],
    )?)
}

/// Line storage maximizing `ρ̄` at fixed `ν̄`, optionally capped.
pub fn line_indices(
    line: &LineParams,
    nu_bar: f64,
    rho_cap: Option<f64>,
    settings: &LmiSettings,
) -> Result<Analysis<PassivityCertificate>, DcmgError> {
    let mut prob = LmiProblem::new();
    let pv = prob.scalar("P_bar");
    let rv = prob.scalar_bounded("rho_bar", None, rho_cap);
    // relative margin: the optimal storage is L/2, however small L is
    prob.pd("P_bar > 0", Expr::var(pv), settings.eps * line.l_l)?;
    let nu = c(DMatrix::from_element(1, 1, nu_bar));
    prob.psd("line", line_block(line, &Expr::var(pv), &nu, &Expr::var(rv))?)?;
    prob.maximize(Expr::var(rv))?;
    match solve_checked(&prob, &settings.solver, "line indices")? {
        Solved::Ok(sol) => Ok(Analysis::Certified(PassivityCertificate {
            supply: SupplyRate::if_ofp(nu_bar, sol.scalar(&rv), 1),
            storage: sol.value(&pv),
            gain: None,
        })),
        Solved::Infeasible(note) => Ok(Analysis::NotCertified(note)),
    }
}

/// Network multipliers certifying `Y`-dissipativity of a fixed interconnection.
#[derive(Debug, Clone)]
pub struct NetworkCertificate {
    pub p: Vec<f64>,
    pub p_bar: Vec<f64>,
}

fn check_rates(dg: &[SupplyRate], line: &[SupplyRate], n: usize, nl: usize) -> Result<(), DcmgError> {
    if dg.len() != n || line.len() != nl {
        return Err(DcmgError::Invalid(format!(
            "expected {n} DG and {nl} line supply rates, got {} and {}",
            dg.len(),
            line.len()
        )));
    }
    if dg.iter().any(|x| x.input_dim() != 3 || x.output_dim() != 3) || line.iter().any(|x| x.input_dim() != 1 || x.output_dim() != 1)
    {
        return Err(DcmgError::Invalid("DG rates must be 3x3 blocks and line rates 1x1".into()));
    }
    Ok(())
}

/// Tests the network dissipation inequality for multipliers `p, p̄ ≥ 0`.
/// This is sufficient only: failure means no certificate was found.
pub fn analyze_network_yeid(
    ic: &InterconnectionMatrix,
    dg_rates: &[SupplyRate],
    line_rates: &[SupplyRate],
    y: &SupplyRate,
    settings: &LmiSettings,
) -> Result<Analysis<NetworkCertificate>, DcmgError> {
    let (nx, nl, nw, nz) = (ic.n_dg_states(), ic.n_lines(), ic.n_disturbances(), ic.n_outputs());
    let n = nx / 3;
    check_rates(dg_rates, line_rates, n, nl)?;
    if y.input_dim() != nw || y.output_dim() != nz {
        return Err(DcmgError::Invalid("network supply rate does not match (w, z)".into()));
    }
    let cols = nx + nl + nw;
    // Rows of the (u, y) pairs for one subsystem, as maps from (x, x_bar, w).
    let stack = |u_rows: DMatrix<f64>, y_rows: DMatrix<f64>| {
        let mut m = DMatrix::zeros(u_rows.nrows() + y_rows.nrows(), cols);
        m.view_mut((0, 0), (u_rows.nrows(), cols)).copy_from(&u_rows);
        m.view_mut((u_rows.nrows(), 0), (y_rows.nrows(), cols)).copy_from(&y_rows);
        m
    };
    let full = ic.full();
    let ident = DMatrix::<f64>::identity(cols, cols);
    let mut prob = LmiProblem::new();
    let mut phi = Expr::zeros(cols, cols);
    let mut pv = Vec::new();
    for (i, x) in dg_rates.iter().enumerate() {
        let v = prob.scalar_bounded(&format!("p{i}"), Some(0.0), None);
        let lam = stack(full.rows(3 * i, 3).into_owned(), ident.rows(3 * i, 3).into_owned());
        phi = phi + Expr::scaled(v, lam.transpose() * x.matrix() * &lam);
        pv.push(v);
    }
    let mut pbv = Vec::new();
    for (l, x) in line_rates.iter().enumerate() {
        let v = prob.scalar_bounded(&format!("pbar{l}"), Some(0.0), None);
        let lam = stack(full.rows(nx + l, 1).into_owned(), ident.rows(nx + l, 1).into_owned());
        phi = phi + Expr::scaled(v, lam.transpose() * x.matrix() * &lam);
        pbv.push(v);
    }
    let lam = stack(ident.rows(nx + nl, nw).into_owned(), full.rows(nx + nl, nz).into_owned());
    phi = phi - c(lam.transpose() * y.matrix() * &lam);
    prob.psd("network dissipation", -phi)?;
    match solve_checked(&prob, &settings.solver, "network analysis")? {
        Solved::Ok(sol) => Ok(Analysis::Certified(NetworkCertificate {
            p: pv.iter().map(|v| sol.scalar(v)).collect(),
            p_bar: pbv.iter().map(|v| sol.scalar(v)).collect(),
        })),
        Solved::Infeasible(note) => Ok(Analysis::NotCertified(format!("no certificate found: {note}"))),
    }
}

/// Fills the lower triangle of a block grid with transposes of the upper one.
pub(crate) fn symmetric_blocks(mut grid: Vec<Vec<Option<Expr>>>, sizes: &[usize]) -> Result<Expr, DcmgError> {
    for i in 0..grid.len() {
        for j in 0..i {
            grid[i][j] = grid[j][i].as_ref().map(|e| e.transpose());
        }
    }
    Ok(Expr::block(&grid, sizes, sizes)?)
}

/// The synthesis matrix and the variables it is built from.
#[derive(Debug)]
pub struct NetworkSynthesis {
    pub problem: LmiProblem,
    pub p: Vec<VarRef>,
    pub p_bar: Vec<VarRef>,
    /// 3N x 3N masked variable; only (2,2) entries of allowed blocks are free.
    pub q: VarRef,
    pub gamma_tilde: Option<VarRef>,
    pub w: Expr,
    /// Sizes of the six super-blocks.
    pub block_sizes: [usize; 6],
}

#[derive(Debug, Clone)]
pub struct SynthesisOptions {
    /// Lower bound on every multiplier.
    pub p_min: f64,
    /// When set, `γ̃ I` is added to `Y11` with `γ̃ ∈ [p_min, gamma_bar]`.
    pub gamma_bar: Option<f64>,
    /// N x N pattern of allowed current-gain entries.
    pub allowed: Vec<Vec<bool>>,
}

/// Assembles the interconnection synthesis LMI for the DC network, with the
/// DG current gains as the designed block (`L_uy = Q`).
pub fn build_network_yeid_synthesis(
    mg: &MicrogridSpec,
    dg_rates: &[SupplyRate],
    line_rates: &[SupplyRate],
    y: &SupplyRate,
    opts: &SynthesisOptions,
) -> Result<NetworkSynthesis, DcmgError> {
    let (n, nl) = (mg.n(), mg.n_lines());
    let nx = 3 * n;
    check_rates(dg_rates, line_rates, n, nl)?;
    let (nw, nz) = (nx + nl, nx + nl);
    if y.input_dim() != nw || y.output_dim() != nz {
        return Err(DcmgError::Invalid("network supply rate does not match (w, z)".into()));
    }
    if !SupplyRate::is_neg_def(&y.x22) {
        return Err(DcmgError::Assumption("the network specification needs Y22 negative definite".into()));
    }
    for (i, x) in dg_rates.iter().enumerate() {
        if !SupplyRate::is_pos_def(&x.x11) {
            return Err(DcmgError::Assumption(format!(
                "DG {i} must be strictly non-passive (X11 positive definite, nu < 0)"
            )));
        }
    }
    for (l, x) in line_rates.iter().enumerate() {
        if !SupplyRate::is_pos_def(&x.x11) {
            return Err(DcmgError::Assumption(format!(
                "line {l} must be strictly non-passive (X11 positive definite, nu < 0)"
            )));
        }
    }
    if opts.allowed.len() != n || opts.allowed.iter().any(|r| r.len() != n) {
        return Err(DcmgError::Invalid("allowed-link pattern must be N x N".into()));
    }

    let (c_bar, cm) = coupling_matrices(mg);
    let (e_c, e_bar_c, h_c, h_bar_c) = network_io(mg);

    let mut prob = LmiProblem::new();
    let mut mask = vec![false; nx * nx];
    for i in 0..n {
        for j in 0..n {
            if opts.allowed[i][j] {
                mask[(3 * i + 1) * nx + 3 * j + 1] = true;
            }
        }
    }
    let qv = prob.masked("Q", nx, nx, mask);
    let pv: Vec<VarRef> =
        (0..n).map(|i| prob.scalar_bounded(&format!("p{i}"), Some(opts.p_min), None)).collect();
    let pbv: Vec<VarRef> =
        (0..nl).map(|l| prob.scalar_bounded(&format!("pbar{l}"), Some(opts.p_min), None)).collect();
    let gv = opts.gamma_bar.map(|g| prob.scalar_bounded("gamma_tilde", Some(opts.p_min), Some(g)));

    // Multiplier-weighted block diagonals.
    let weighted = |vars: &[VarRef], blocks: Vec<&DMatrix<f64>>, dim: usize, size: usize| {
        let mut e = Expr::zeros(dim, dim);
        for (k, (v, b)) in vars.iter().zip(blocks).enumerate() {
            let mut m = DMatrix::zeros(dim, dim);
            m.view_mut((k * size, k * size), (size, size)).copy_from(b);
            e = e + Expr::scaled(*v, m);
        }
        e
    };
    let xp11 = weighted(&pv, dg_rates.iter().map(|x| &x.x11).collect(), nx, 3);
    let xp22 = weighted(&pv, dg_rates.iter().map(|x| &x.x22).collect(), nx, 3);
    let xb11 = weighted(&pbv, line_rates.iter().map(|x| &x.x11).collect(), nl, 1);
    let xb22 = weighted(&pbv, line_rates.iter().map(|x| &x.x22).collect(), nl, 1);
    let inv = |x: &SupplyRate| x.x11.clone().try_inverse().expect("positive definite") * &x.x12;
    let x12 = block_diag(&dg_rates.iter().map(inv).collect::<Vec<_>>());
    let x21 = x12.transpose();
    let xb12 = block_diag(&line_rates.iter().map(inv).collect::<Vec<_>>());
    let xb21 = xb12.transpose();

    let q = Expr::var(qv);
    let l_uyb = xp11.rmul(&c_bar);
    let l_uw = xp11.rmul(&e_c);
    let l_uby = xb11.rmul(&cm);
    let l_ubw = xb11.rmul(&e_bar_c);
    let neg_y22 = -y.x22.clone();
    let mut y11 = c(y.x11.clone());
    if let Some(g) = gv {
        y11 = y11 + Expr::scaled_identity(g, nw);
    }

    let r1 = vec![
        Some(xp11.clone()),
        None,
        None,
        Some(q.clone()),
        Some(l_uyb.clone()),
        Some(l_uw.clone()),
    ];
    let r2 = vec![None, Some(xb11.clone()), None, Some(l_uby.clone()), None, Some(l_ubw.clone())];
    let r3 = vec![
        None,
        None,
        Some(c(neg_y22.clone())),
        Some(c(&neg_y22 * &h_c)),
        Some(c(&neg_y22 * &h_bar_c)),
        None,
    ];
    let b44 = -(q.transpose().rmul(&x12)) - q.lmul(&x21) - xp22;
    let b45 = -(l_uyb.lmul(&x21)) - l_uby.transpose().rmul(&xb12);
    let b46 = -(l_uw.lmul(&x21)) + c(h_c.transpose() * &y.x21);
    let b55 = -xb22;
    let b56 = -(l_ubw.lmul(&xb21)) + c(h_bar_c.transpose() * &y.x21);
    let r4 = vec![None, None, None, Some(b44), Some(b45), Some(b46)];
    let r5 = vec![None, None, None, None, Some(b55), Some(b56)];
    let r6 = vec![None, None, None, None, None, Some(y11)];
    let sizes = [nx, nl, nz, nx, nl, nw];
    let w = symmetric_blocks(vec![r1, r2, r3, r4, r5, r6], &sizes)?;
    Ok(NetworkSynthesis { problem: prob, p: pv, p_bar: pbv, q: qv, gamma_tilde: gv, w, block_sizes: sizes })
}
