//! Local controller synthesis, the necessary conditions linking local
//! indices to global feasibility, and the distributed gain / communication
//! topology co-design.

use std::time::Instant;

use lmi_core::{AffineMatrixExpr as Expr, LmiProblem, VarRef};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dissipativity::{
    build_network_yeid_synthesis, line_block, line_indices, symmetric_blocks, synthesis_block, Analysis,
    LmiSettings, SupplyRate, SynthesisOptions,
};
use crate::model::{current_gains, dg_state_matrices, embed_current_gains, MicrogridSpec};
use crate::{solve_checked, DcmgError, Solved};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphMode {
    /// Links only between physically adjacent DGs.
    Hard,
    /// Any link allowed, each penalized by its cost.
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignParams {
    pub p: Vec<f64>,
    pub p_bar: Vec<f64>,
    pub gamma_bar: f64,
    /// N x N soft-mode link costs (zero diagonal).
    pub c_link: Vec<Vec<f64>>,
    pub c1: f64,
    pub alpha_slack: f64,
    pub eta_slack: f64,
    pub graph_mode: GraphMode,
    pub eps_margin: f64,
    /// Link threshold relative to the largest recovered gain.
    pub eps_topology: f64,
    /// Lines are designed at `ν̄ = -nu_bar_nudge` so that they are strictly
    /// non-passive.
    pub nu_bar_nudge: f64,
    /// Target `ν` of the decoupled local design.
    pub local_nu: f64,
    /// Upper limit when the slack cap is escalated.
    pub eta_max: f64,
}

impl DesignParams {
    /// Defaults with soft costs `1 + d_ij / d_max` (uniform when no
    /// distances are supplied).
    pub fn defaults(mg: &MicrogridSpec, distances: Option<&DMatrix<f64>>) -> Self {
        let n = mg.n();
        let dmax = distances.map(|d| d.max()).filter(|m| *m > 0.0);
        let c_link = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| match (i == j, distances, dmax) {
                        (true, _, _) => 0.0,
                        (false, Some(d), Some(m)) => 1.0 + d[(i, j)] / m,
                        _ => 1.0,
                    })
                    .collect()
            })
            .collect();
        DesignParams {
            p: vec![0.1; n],
            p_bar: vec![0.01; mg.n_lines()],
            gamma_bar: 1000.0,
            c_link,
            c1: 1e-3,
            alpha_slack: 1e2,
            eta_slack: 1e-4,
            graph_mode: GraphMode::Soft,
            eps_margin: 1e-6,
            eps_topology: 1e-6,
            nu_bar_nudge: 1e-4,
            local_nu: -10.0,
            eta_max: 1e4,
        }
    }

    pub fn validate(&self, mg: &MicrogridSpec) -> Result<(), DcmgError> {
        let n = mg.n();
        if self.p.len() != n || self.p_bar.len() != mg.n_lines() {
            return Err(DcmgError::Invalid("p / p_bar lengths do not match the network".into()));
        }
        if self.p.iter().chain(&self.p_bar).any(|x| !(*x > 0.0)) {
            return Err(DcmgError::Invalid("p and p_bar must be positive".into()));
        }
        if !(self.gamma_bar > 0.0) {
            return Err(DcmgError::Invalid("gamma_bar must be positive".into()));
        }
        if self.c_link.len() != n || self.c_link.iter().any(|r| r.len() != n) {
            return Err(DcmgError::Invalid("c_link must be N x N".into()));
        }
        for i in 0..n {
            if self.c_link[i][i] != 0.0 || self.c_link[i].iter().any(|c| !(*c >= 0.0)) {
                return Err(DcmgError::Invalid("c_link must be nonnegative with a zero diagonal".into()));
            }
        }
        if !(self.eta_slack >= 0.0 && self.eps_margin > 0.0 && self.nu_bar_nudge > 0.0 && self.local_nu < 0.0) {
            return Err(DcmgError::Invalid("eta >= 0, eps > 0, nudge > 0 and local nu < 0 required".into()));
        }
        Ok(())
    }

    fn settings(&self, base: &LmiSettings) -> LmiSettings {
        LmiSettings { eps: self.eps_margin, solver: base.solver.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgLocal {
    /// Local state feedback on `[V - V_r, I_t - I_tE, v]`.
    pub gain: DMatrix<f64>,
    /// Synthesis variable; the storage matrix is its inverse.
    pub p: DMatrix<f64>,
    pub nu: f64,
    pub rho_tilde: f64,
    pub gamma_tilde: f64,
}

impl DgLocal {
    pub fn rho(&self) -> f64 {
        1.0 / self.rho_tilde
    }

    pub fn storage(&self) -> DMatrix<f64> {
        self.p.clone().try_inverse().expect("storage is positive definite")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LineLocal {
    pub nu_bar: f64,
    pub rho_bar: f64,
    pub p_bar: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalMethod {
    /// One LMI over all subsystems with the necessary conditions enforced.
    Joint,
    /// Independent per-subsystem designs; necessary conditions only reported.
    Decoupled,
}

#[derive(Debug, Clone)]
pub struct LocalDesign {
    pub dgs: Vec<DgLocal>,
    pub lines: Vec<LineLocal>,
    /// `(i, l, ξ_il)`.
    pub xi: Vec<(usize, usize, f64)>,
    pub s1: f64,
    pub s2: f64,
    pub method: LocalMethod,
    pub note: String,
}

impl LocalDesign {
    pub fn dg_rates(&self) -> Vec<SupplyRate> {
        self.dgs.iter().map(|d| SupplyRate::if_ofp(d.nu, d.rho(), 3)).collect()
    }

    pub fn line_rates(&self) -> Vec<SupplyRate> {
        self.lines.iter().map(|l| SupplyRate::if_ofp(l.nu_bar, l.rho_bar, 1)).collect()
    }

    pub fn gains(&self) -> Vec<DMatrix<f64>> {
        self.dgs.iter().map(|d| d.gain.clone()).collect()
    }
}

fn k(x: f64) -> Expr {
    Expr::constant(DMatrix::from_element(1, 1, x))
}

/// Incident (DG, line) pairs with `C̄_il = -B_il / C_ti` and `C_il = B_il`.
fn incidences(mg: &MicrogridSpec) -> Vec<(usize, usize, f64, f64)> {
    let b = mg.bi_adjacency();
    let mut out = Vec::new();
    for i in 0..mg.n() {
        for l in 0..mg.n_lines() {
            if b[(i, l)] != 0.0 {
                out.push((i, l, -b[(i, l)] / mg.dgs[i].c_t, b[(i, l)]));
            }
        }
    }
    out
}

/// Scalars entering one transformed necessary-condition matrix.
pub(crate) struct PairScalars {
    pub nu: Expr,
    pub rho_tilde: Expr,
    pub gamma_tilde: Expr,
    pub nu_bar: Expr,
    pub rho_bar: Expr,
    pub xi: Expr,
}

/// The transformed 6x6 matrix in `(ν, ρ̃, γ̃, ν̄, ρ̄, ξ)` for fixed `p, p̄`.
pub(crate) fn transformed_block(s: &PairScalars, p: f64, pb: f64, cbar: f64, cc: f64) -> Result<Expr, DcmgError> {
    let pn = s.nu.scale(-p);
    let pbn = s.nu_bar.scale(-pb);
    let rt = &s.rho_tilde;
    let row = |v: Vec<Option<Expr>>| v;
    let grid = vec![
        row(vec![Some(pn.clone()), None, None, None, Some(pn.scale(cbar)), Some(pn.clone())]),
        row(vec![None, Some(pbn.clone()), None, Some(s.xi.scale(-pb * cc)), None, Some(pbn.clone())]),
        row(vec![None, None, Some(k(1.0)), Some(rt.clone()), Some(k(1.0)), None]),
        row(vec![
            None,
            None,
            None,
            Some(rt.scale(p)),
            Some(rt.scale(-0.5 * p * cbar - 0.5 * cc * pb)),
            Some(rt.scale(-0.5 * p)),
        ]),
        row(vec![None, None, None, None, Some(s.rho_bar.scale(pb)), Some(k(-0.5 * pb))]),
        row(vec![None, None, None, None, None, Some(s.gamma_tilde.clone())]),
    ];
    symmetric_blocks(grid, &[1; 6])
}

/// One evaluated necessary-condition matrix.
#[derive(Debug, Clone)]
pub struct NecessaryVerdict {
    pub dg: usize,
    pub line: usize,
    pub matrix: DMatrix<f64>,
    pub min_eig: f64,
    pub pd: bool,
}

/// Indices used by the necessary-condition checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairIndices {
    pub nu: f64,
    pub rho: f64,
    pub nu_bar: f64,
    pub rho_bar: f64,
}

/// The untransformed 6x6 necessary-condition matrix for one DG-line pair.
pub fn necessary_matrix(ix: &PairIndices, p: f64, pb: f64, gamma_tilde: f64, cbar: f64, cc: f64) -> DMatrix<f64> {
    let (pn, pbn) = (p * ix.nu, pb * ix.nu_bar);
    let x = -0.5 * p * cbar - 0.5 * cc * pb;
    #[rustfmt::skip]
    let m = DMatrix::from_row_slice(6, 6, &[
        -pn, 0.0, 0.0, 0.0, -pn * cbar, -pn,
        0.0, -pbn, 0.0, -pbn * cc, 0.0, -pbn,
        0.0, 0.0, 1.0, 1.0, 1.0, 0.0,
        0.0, -cc * pbn, 1.0, p * ix.rho, x, -0.5 * p,
        -cbar * pn, 0.0, 1.0, x, pb * ix.rho_bar, -0.5 * pb,
        -pn, -pbn, 0.0, -0.5 * p, -0.5 * pb, gamma_tilde,
    ]);
    m
}

/// Evaluates the necessary-condition matrix for every incident DG-line pair.
pub fn necessary_condition_matrices(
    mg: &MicrogridSpec,
    dg: &[(f64, f64)],
    line: &[(f64, f64)],
    p: &[f64],
    p_bar: &[f64],
    gamma_tilde: &[f64],
) -> Result<Vec<NecessaryVerdict>, DcmgError> {
    if dg.len() != mg.n() || p.len() != mg.n() || gamma_tilde.len() != mg.n() {
        return Err(DcmgError::Invalid("DG index vectors do not match the network".into()));
    }
    if line.len() != mg.n_lines() || p_bar.len() != mg.n_lines() {
        return Err(DcmgError::Invalid("line index vectors do not match the network".into()));
    }
    let mut out = Vec::new();
    for (i, l, cbar, cc) in incidences(mg) {
        let ix = PairIndices { nu: dg[i].0, rho: dg[i].1, nu_bar: line[l].0, rho_bar: line[l].1 };
        let m = necessary_matrix(&ix, p[i], p_bar[l], gamma_tilde[i], cbar, cc);
        let min_eig = m.clone().symmetric_eigenvalues().min();
        out.push(NecessaryVerdict { dg: i, line: l, matrix: m, min_eig, pd: min_eig > 0.0 });
    }
    Ok(out)
}

/// The scalar (per-pair) version of the necessary conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarConditions {
    pub nu_range: bool,
    pub rho_over_inv_p: bool,
    pub rho_over_gamma: bool,
    pub rho_bar_over_nu: bool,
    pub rho_bar_over_coupling: bool,
    pub nu_bar_range: bool,
}

impl ScalarConditions {
    pub fn all(&self) -> bool {
        self.nu_range
            && self.rho_over_inv_p
            && self.rho_over_gamma
            && self.rho_bar_over_nu
            && self.rho_bar_over_coupling
            && self.nu_bar_range
    }

    pub fn list(&self) -> [(&'static str, bool); 6] {
        [
            ("-gamma/p < nu < 0", self.nu_range),
            ("1/p < rho", self.rho_over_inv_p),
            ("p/(4 gamma) < rho", self.rho_over_gamma),
            ("rho_bar > -p nu / (p_bar C_t^2)", self.rho_bar_over_nu),
            ("rho_bar > (p/(2C_t) - p_bar/2)^2 / (p p_bar rho)", self.rho_bar_over_coupling),
            ("-p rho / p_bar < nu_bar < 0", self.nu_bar_range),
        ]
    }
}

pub fn scalar_necessary_conditions(ix: &PairIndices, p: f64, pb: f64, gamma_tilde: f64, c_t: f64) -> ScalarConditions {
    let PairIndices { nu, rho, nu_bar, rho_bar } = *ix;
    ScalarConditions {
        nu_range: -gamma_tilde / p < nu && nu < 0.0,
        rho_over_inv_p: 1.0 / p < rho,
        rho_over_gamma: p / (4.0 * gamma_tilde) < rho,
        rho_bar_over_nu: rho_bar > -p * nu / (pb * c_t * c_t),
        rho_bar_over_coupling: rho_bar > (p / (2.0 * c_t) - pb / 2.0).powi(2) / (p * pb * rho),
        nu_bar_range: -p * rho / pb < nu_bar && nu_bar < 0.0,
    }
}

/// Chord `(m, c)` of `ρ̃ ↦ -p / (p̄ ρ̃)` over `[ρ̃_min, min(p, 4γ̄/p)]`.
/// The function is concave there, so the chord lies below it.
pub fn nu_bar_chord(p: f64, pb: f64, rho_tilde_min: f64, gamma_bar: f64) -> Result<(f64, f64), DcmgError> {
    let hi = p.min(4.0 * gamma_bar / p);
    if !(rho_tilde_min > 0.0 && rho_tilde_min < hi) {
        return Err(DcmgError::Invalid(format!("need 0 < rho_tilde_min < {hi}")));
    }
    let f = |r: f64| -p / (pb * r);
    let m = (f(hi) - f(rho_tilde_min)) / (hi - rho_tilde_min);
    Ok((m, f(hi) - m * hi))
}

/// Box on the synthesis variables. Without it the gain drifts along
/// directions that only help, and the LMI becomes too ill-conditioned for
/// the absolute residual check.
const P_BOUND: f64 = 1e5;
const GAIN_BOUND: f64 = 1e6;

/// `‖E‖₂ ≤ κ` as `[[κI, Eᵀ], [E, κI]] ⪰ 0` for a 1x1 `κ`.
fn norm_bound(e: &Expr, kappa: Expr) -> Result<Expr, DcmgError> {
    let (r, c) = e.dims();
    let eye = |n: usize| {
        let mut out = Expr::zeros(n, n);
        for k in 0..n {
            out = out + kappa.embed(n, n, k, k);
        }
        out
    };
    Ok(Expr::block(
        &[vec![Some(eye(c)), Some(e.transpose())], vec![Some(e.clone()), Some(eye(r))]],
        &[c, r],
        &[c, r],
    )?)
}

struct DgVars {
    p: VarRef,
    k: VarRef,
    nu: VarRef,
    rho_tilde: VarRef,
    gamma_tilde: VarRef,
}

/// Joint local design: DG synthesis blocks, line blocks and the transformed
/// necessary conditions in one LMI, minimizing `Σ γ̃_i`.
pub fn design_local(mg: &MicrogridSpec, params: &DesignParams, base: &LmiSettings) -> Result<LocalDesign, DcmgError> {
    mg.validate()?;
    params.validate(mg)?;
    let settings = params.settings(base);
    let eps = settings.eps;
    let mut prob = LmiProblem::new();
    let mut dvars = Vec::new();
    for (i, dg) in mg.dgs.iter().enumerate() {
        let (a, b, _) = dg_state_matrices(dg);
        let v = DgVars {
            p: prob.symmetric(&format!("P{i}"), 3),
            k: prob.rect(&format!("Ktilde{i}"), 1, 3),
            nu: prob.scalar_bounded(&format!("nu{i}"), None, Some(-eps)),
            rho_tilde: prob.scalar_bounded(&format!("rho_tilde{i}"), Some(eps), None),
            gamma_tilde: prob.scalar_bounded(&format!("gamma_tilde{i}"), Some(eps), Some(params.gamma_bar - eps)),
        };
        let p = Expr::var(v.p);
        prob.pd(&format!("P{i} > 0"), p.clone(), eps)?;
        prob.psd(&format!("P{i} bound"), Expr::constant(DMatrix::identity(3, 3) * P_BOUND) - p.clone())?;
        prob.psd(&format!("gain {i} bound"), norm_bound(&Expr::var(v.k), Expr::identity(1).scale(GAIN_BOUND))?)?;
        let blk = synthesis_block(
            &a,
            &b,
            &p,
            &Expr::var(v.k),
            Expr::scaled_identity(v.rho_tilde, 3),
            &(DMatrix::identity(3, 3) * 0.5),
            Expr::scaled_identity(v.nu, 3).scale(-1.0),
        )?;
        prob.pd(&format!("DG {i} synthesis"), blk, eps)?;
        dvars.push(v);
    }
    let mut lvars = Vec::new();
    for (l, line) in mg.lines.iter().enumerate() {
        let pv = prob.scalar(&format!("Pbar{l}"));
        let nv = prob.scalar_bounded(&format!("nu_bar{l}"), None, Some(-params.nu_bar_nudge));
        let rv = prob.scalar_bounded(&format!("rho_bar{l}"), None, Some(line.r_l));
        prob.pd(&format!("Pbar{l} > 0"), Expr::var(pv), eps)?;
        prob.psd(&format!("line {l}"), line_block(line, &Expr::var(pv), &Expr::var(nv), &Expr::var(rv))?)?;
        lvars.push((pv, nv, rv));
    }
    let s1 = prob.scalar("s1");
    let s2 = prob.scalar("s2");
    let mut xis = Vec::new();
    for (i, l, cbar, cc) in incidences(mg) {
        let xi = prob.scalar(&format!("xi_{i}_{l}"));
        let d = &dvars[i];
        let (_, nv, rv) = lvars[l];
        let schur = symmetric_blocks(
            vec![
                vec![Some(k(1.0)), Some(Expr::var(nv)), Some(Expr::var(d.rho_tilde))],
                vec![None, Some(Expr::var(s1)), Some(Expr::var(xi))],
                vec![None, None, Some(Expr::var(s2))],
            ],
            &[1; 3],
        )?;
        prob.psd(&format!("bilinear bound {i},{l}"), schur)?;
        let s = PairScalars {
            nu: Expr::var(d.nu),
            rho_tilde: Expr::var(d.rho_tilde),
            gamma_tilde: Expr::var(d.gamma_tilde),
            nu_bar: Expr::var(nv),
            rho_bar: Expr::var(rv),
            xi: Expr::var(xi),
        };
        let blk = transformed_block(&s, params.p[i], params.p_bar[l], cbar, cc)?;
        prob.pd(&format!("necessary condition {i},{l}"), blk, eps)?;
        xis.push((i, l, xi));
    }
    let mut obj = Expr::zeros(1, 1);
    for d in &dvars {
        obj = obj + Expr::var(d.gamma_tilde);
    }
    prob.minimize(obj)?;

    let sol = match solve_checked(&prob, &settings.solver, "local design")? {
        Solved::Ok(s) => s,
        Solved::Infeasible(note) => {
            return Err(DcmgError::Infeasible {
                stage: "local design",
                reason: format!("{note}; try a larger gamma_bar or different p / p_bar"),
            })
        }
    };
    let mut dgs = Vec::new();
    for d in &dvars {
        let p = sol.value(&d.p);
        let pinv = p.clone().try_inverse().ok_or_else(|| DcmgError::Numerical {
            stage: "local design",
            note: "singular P".into(),
        })?;
        dgs.push(DgLocal {
            gain: sol.value(&d.k) * pinv,
            p,
            nu: sol.scalar(&d.nu),
            rho_tilde: sol.scalar(&d.rho_tilde),
            gamma_tilde: sol.scalar(&d.gamma_tilde),
        });
    }
    let lines = lvars
        .iter()
        .map(|(p, n, r)| LineLocal { nu_bar: sol.scalar(n), rho_bar: sol.scalar(r), p_bar: sol.scalar(p) })
        .collect();
    Ok(LocalDesign {
        dgs,
        lines,
        xi: xis.iter().map(|(i, l, v)| (*i, *l, sol.scalar(v))).collect(),
        s1: sol.scalar(&s1),
        s2: sol.scalar(&s2),
        method: LocalMethod::Joint,
        note: format!("{:?} after {} iterations", sol.status, sol.iterations),
    })
}

/// Fallback local design: each DG synthesized alone at `ν = local_nu` with
/// `ρ` within 10 % of its best value and the smallest feedback gain, each line at `ν̄ = -nu_bar_nudge` with `ρ̄ ≤ R_l`
/// maximized. The necessary conditions are not imposed; `γ̄` still bounds `γ̃`.
pub fn design_local_decoupled(
    mg: &MicrogridSpec,
    params: &DesignParams,
    base: &LmiSettings,
) -> Result<LocalDesign, DcmgError> {
    mg.validate()?;
    params.validate(mg)?;
    let settings = params.settings(base);
    let eps = settings.eps;
    let nu = params.local_nu;
    let mut dgs = Vec::new();
    for (i, dg) in mg.dgs.iter().enumerate() {
        let (a, b, _) = dg_state_matrices(dg);
        // Best ρ̃ first, then the smallest gain within 10 % of it.
        let mut rho_tilde = None;
        for stage in 0..2 {
            let mut prob = LmiProblem::new();
            let pv = prob.symmetric("P", 3);
            let kv = prob.rect("Ktilde", 1, 3);
            let p = Expr::var(pv);
            prob.pd("P > 0", p.clone(), eps)?;
            prob.psd("P bound", Expr::constant(DMatrix::identity(3, 3) * P_BOUND) - p.clone())?;
            let (x22, obj, target) = match rho_tilde {
                None => {
                    let rv = prob.scalar_bounded("rho_tilde", Some(eps), None);
                    prob.psd("gain bound", norm_bound(&Expr::var(kv), Expr::identity(1).scale(GAIN_BOUND))?)?;
                    (Expr::scaled_identity(rv, 3), Expr::var(rv), Some(rv))
                }
                Some(r) => {
                    let kap = prob.scalar("kappa");
                    prob.psd("gain bound", norm_bound(&Expr::var(kv), Expr::var(kap))?)?;
                    (Expr::identity(3).scale(1.1 * r), Expr::var(kap), None)
                }
            };
            let blk = synthesis_block(
                &a,
                &b,
                &p,
                &Expr::var(kv),
                x22,
                &(DMatrix::identity(3, 3) * 0.5),
                Expr::identity(3).scale(-nu),
            )?;
            prob.pd("synthesis", blk, eps)?;
            prob.minimize(obj)?;
            let sol = match solve_checked(&prob, &settings.solver, "local design")? {
                Solved::Ok(s) => s,
                Solved::Infeasible(note) => {
                    return Err(DcmgError::Infeasible { stage: "local design", reason: format!("DG {i}: {note}") })
                }
            };
            if let Some(rv) = target {
                rho_tilde = Some(sol.scalar(&rv));
                continue;
            }
            let pm = sol.value(&pv);
            let pinv = pm.clone().try_inverse().ok_or_else(|| DcmgError::Numerical {
                stage: "local design",
                note: "singular P".into(),
            })?;
            let rho_tilde = 1.1 * rho_tilde.expect("first stage ran");
            // Smallest γ̃ meeting the DG-only scalar conditions.
            let need = (-params.p[i] * nu).max(params.p[i] * rho_tilde / 4.0) * (1.0 + 1e-3);
            if need >= params.gamma_bar {
                return Err(DcmgError::Infeasible {
                    stage: "local design",
                    reason: format!("DG {i} needs gamma_tilde >= {need:.4e}; try a larger gamma_bar"),
                });
            }
            debug_assert_eq!(stage, 1);
            dgs.push(DgLocal { gain: sol.value(&kv) * pinv, p: pm, nu, rho_tilde, gamma_tilde: need });
        }
    }
    let mut lines = Vec::new();
    for (l, line) in mg.lines.iter().enumerate() {
        match line_indices(line, -params.nu_bar_nudge, Some(line.r_l), &settings)? {
            Analysis::Certified(c) => lines.push(LineLocal {
                nu_bar: -params.nu_bar_nudge,
                rho_bar: c.rho().expect("IF-OFP"),
                p_bar: c.storage[(0, 0)],
            }),
            Analysis::NotCertified(note) => {
                return Err(DcmgError::Infeasible { stage: "local design", reason: format!("line {l}: {note}") })
            }
        }
    }
    let xi: Vec<(usize, usize, f64)> =
        incidences(mg).iter().map(|&(i, l, _, _)| (i, l, lines[l].nu_bar * dgs[i].rho_tilde)).collect();
    let s1 = lines.iter().map(|l| l.nu_bar * l.nu_bar).fold(0.0, f64::max);
    let s2 = dgs.iter().map(|d| d.rho_tilde * d.rho_tilde).fold(0.0, f64::max);
    Ok(LocalDesign {
        dgs,
        lines,
        xi,
        s1,
        s2,
        method: LocalMethod::Decoupled,
        note: format!("decoupled design at nu = {nu}, nu_bar = {}", -params.nu_bar_nudge),
    })
}

/// Evaluates the necessary conditions at a local design's own indices.
pub fn local_necessary_verdicts(
    mg: &MicrogridSpec,
    local: &LocalDesign,
    params: &DesignParams,
) -> Result<Vec<NecessaryVerdict>, DcmgError> {
    let dg: Vec<(f64, f64)> = local.dgs.iter().map(|d| (d.nu, d.rho())).collect();
    let line: Vec<(f64, f64)> = local.lines.iter().map(|l| (l.nu_bar, l.rho_bar)).collect();
    let g: Vec<f64> = local.dgs.iter().map(|d| d.gamma_tilde).collect();
    necessary_condition_matrices(mg, &dg, &line, &params.p, &params.p_bar, &g)
}

/// A directed communication link `from -> to` with gain `k_{to,from}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Link {
    pub from: usize,
    pub to: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CommGraph {
    pub links: Vec<Link>,
    /// N x N consensus gains `k_ij` (zero diagonal), including sub-threshold values.
    pub k: DMatrix<f64>,
}

impl CommGraph {
    pub fn max_gain(&self) -> f64 {
        self.links.iter().map(|l| l.gain.abs()).fold(0.0, f64::max)
    }

    pub fn has_link(&self, from: usize, to: usize) -> bool {
        self.links.iter().any(|l| l.from == from && l.to == to)
    }
}

/// Recovers `k_ij = -I_nj L_ti K_ij(2,2)` and the links above
/// `eps_rel · max|k|`, after checking the diagonal blocks.
pub fn extract_topology(
    k_block: &DMatrix<f64>,
    i_n: &DVector<f64>,
    l_t: &[f64],
    eps_rel: f64,
    tol: f64,
) -> Result<CommGraph, DcmgError> {
    let n = i_n.len();
    if k_block.nrows() != 3 * n || k_block.ncols() != 3 * n || l_t.len() != n {
        return Err(DcmgError::Structure("gain dimensions do not match the network".into()));
    }
    for i in 0..n {
        for j in 0..n {
            for a in 0..3 {
                for b in 0..3 {
                    if (a, b) != (1, 1) && k_block[(3 * i + a, 3 * j + b)] != 0.0 {
                        return Err(DcmgError::Structure(format!("block ({i}, {j}) has a nonzero entry at ({a}, {b})")));
                    }
                }
            }
        }
    }
    let ki = current_gains(k_block);
    let kk = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { -i_n[j] * l_t[i] * ki[(i, j)] });
    for i in 0..n {
        let expect: f64 = (0..n).map(|j| kk[(i, j)]).sum::<f64>() / (l_t[i] * i_n[i]);
        let scale = (0..n).map(|j| ki[(i, j)].abs() * i_n[j] / i_n[i]).sum::<f64>().max(1e-300);
        if (ki[(i, i)] - expect).abs() > tol * scale.max(1.0) {
            return Err(DcmgError::Structure(format!(
                "diagonal block {i} is {:.6e}, the off-diagonal gains imply {expect:.6e}",
                ki[(i, i)]
            )));
        }
    }
    let kmax = kk.amax();
    let mut links = Vec::new();
    if kmax > 0.0 {
        for i in 0..n {
            for j in 0..n {
                if i != j && kk[(i, j)].abs() > eps_rel * kmax {
                    links.push(Link { from: j, to: i, gain: kk[(i, j)] });
                }
            }
        }
    }
    Ok(CommGraph { links, k: kk })
}

#[derive(Debug, Clone)]
pub struct CodesignResult {
    pub k: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub comm: CommGraph,
    pub gamma: f64,
    pub gamma_tilde: f64,
    pub p: Vec<f64>,
    pub p_bar: Vec<f64>,
    pub slack: Vec<f64>,
    pub slack_trace: f64,
    pub objective: f64,
    pub eta_used: f64,
    /// Set when the slack is active: W itself need not be positive definite.
    pub approximate: bool,
    pub mode: GraphMode,
    pub diagnostics: Vec<String>,
    pub seconds: f64,
}

/// Cost of a design under the given link costs.
pub fn codesign_objective(r: &CodesignResult, c_link: &[Vec<f64>], c1: f64, alpha: f64) -> f64 {
    let n = r.p.len();
    let mut l1 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                l1 += c_link[i][j] * r.q[(3 * i + 1, 3 * j + 1)].abs();
            }
        }
    }
    l1 + c1 * r.gamma_tilde + alpha * r.slack_trace
}

/// Link costs actually used in the objective for a mode.
pub fn effective_costs(mg: &MicrogridSpec, params: &DesignParams) -> Vec<Vec<f64>> {
    match params.graph_mode {
        GraphMode::Soft => params.c_link.clone(),
        GraphMode::Hard => vec![vec![0.0; mg.n()]; mg.n()],
    }
}

/// Allowed current-gain pattern for a mode.
pub fn allowed_links(mg: &MicrogridSpec, mode: GraphMode) -> Vec<Vec<bool>> {
    let adj = mg.topology().adjacency();
    (0..mg.n())
        .map(|i| (0..mg.n()).map(|j| i == j || mode == GraphMode::Soft || adj[i][j]).collect())
        .collect()
}

/// Global co-design at a fixed slack cap.
fn design_global_at(
    mg: &MicrogridSpec,
    local: &LocalDesign,
    params: &DesignParams,
    settings: &LmiSettings,
    eta: f64,
) -> Result<Result<CodesignResult, String>, DcmgError> {
    let t0 = Instant::now();
    let n = mg.n();
    let eps = settings.eps;
    let dg_rates = local.dg_rates();
    let line_rates = local.line_rates();
    let nw = 3 * n + mg.n_lines();
    let y = SupplyRate {
        x11: DMatrix::zeros(nw, nw),
        x12: DMatrix::zeros(nw, nw),
        x21: DMatrix::zeros(nw, nw),
        x22: -DMatrix::identity(nw, nw),
    };
    let allowed = allowed_links(mg, params.graph_mode);
    let opts = SynthesisOptions { p_min: eps, gamma_bar: Some(params.gamma_bar - eps), allowed: allowed.clone() };
    let syn = build_network_yeid_synthesis(mg, &dg_rates, &line_rates, &y, &opts)?;
    let mut prob = syn.problem;
    let gv = syn.gamma_tilde.expect("gamma is a variable");
    let dim = syn.w.dims().0;

    // Diagonal slack.
    let sv: Vec<VarRef> = (0..dim).map(|k| prob.scalar_bounded(&format!("s{k}"), Some(0.0), None)).collect();
    let mut w = syn.w.clone();
    let mut tr = Expr::zeros(1, 1);
    for (k, v) in sv.iter().enumerate() {
        w = w + Expr::var(*v).embed(dim, dim, k, k);
        tr = tr + Expr::var(*v);
    }
    prob.pd("W + s_W > 0", w, eps)?;
    prob.psd("slack cap", Expr::constant(DMatrix::from_element(1, 1, eta)) - tr.clone())?;

    // Weighted-Laplacian rows on the current gains.
    let q = Expr::var(syn.q);
    let i_n = mg.rated_currents();
    let qij = |i: usize, j: usize| q.entry(3 * i + 1, 3 * j + 1);
    for i in 0..n {
        let mut row = Expr::zeros(1, 1);
        for j in 0..n {
            if allowed[i][j] {
                row = row + qij(i, j).scale(i_n[j]);
            }
        }
        prob.eq_zero(&format!("Laplacian row {i}"), row)?;
    }

    // L1 epigraph on the off-diagonal gains.
    let costs = effective_costs(mg, params);
    let mut obj = Expr::var(gv).scale(params.c1) + tr.scale(params.alpha_slack);
    for i in 0..n {
        for j in 0..n {
            if i != j && allowed[i][j] && costs[i][j] > 0.0 {
                let t = prob.scalar(&format!("t_{i}_{j}"));
                prob.psd(&format!("|q_{i}{j}| upper"), Expr::var(t) - qij(i, j))?;
                prob.psd(&format!("|q_{i}{j}| lower"), Expr::var(t) + qij(i, j))?;
                obj = obj + Expr::var(t).scale(costs[i][j]);
            }
        }
    }
    prob.minimize(obj)?;

    let sol = match prob.solve(&settings.solver)? {
        s if s.status.is_ok() => s,
        s => return Ok(Err(format!("{:?}: {}", s.status, s.note))),
    };
    let p: Vec<f64> = syn.p.iter().map(|v| sol.scalar(v)).collect();
    let p_bar: Vec<f64> = syn.p_bar.iter().map(|v| sol.scalar(v)).collect();
    let qm = sol.value(&syn.q);
    let k_i = DMatrix::from_fn(n, n, |i, j| qm[(3 * i + 1, 3 * j + 1)] / (-p[i] * local.dgs[i].nu));
    let k = embed_current_gains(&k_i);
    let l_t: Vec<f64> = mg.dgs.iter().map(|d| d.l_t).collect();
    let comm = extract_topology(&k, &i_n, &l_t, params.eps_topology, 1e-6)?;
    let slack: Vec<f64> = sv.iter().map(|v| sol.scalar(v)).collect();
    let slack_trace: f64 = slack.iter().sum();
    let gamma_tilde = sol.scalar(&gv);
    let mut diagnostics = vec![format!(
        "{:?} in {} iterations, eta = {eta:.1e}, PSD violation {:.2e}",
        sol.status, sol.iterations, sol.psd_violation
    )];
    let approximate = slack_trace > 1e-7;
    if approximate {
        diagnostics.push(format!("approximate dissipativity: tr(s_W) = {slack_trace:.3e}"));
    }
    let mut r = CodesignResult {
        k,
        q: qm,
        comm,
        gamma: gamma_tilde.sqrt(),
        gamma_tilde,
        p,
        p_bar,
        slack,
        slack_trace,
        objective: 0.0,
        eta_used: eta,
        approximate,
        mode: params.graph_mode,
        diagnostics,
        seconds: 0.0,
    };
    r.objective = codesign_objective(&r, &costs, params.c1, params.alpha_slack);
    r.seconds = t0.elapsed().as_secs_f64();
    Ok(Ok(r))
}

/// Global co-design of the distributed current gains and the communication
/// topology. With `escalate`, an infeasible slack cap is raised tenfold up
/// to `eta_max`; the result then carries the approximate flag.
pub fn design_global(
    mg: &MicrogridSpec,
    local: &LocalDesign,
    params: &DesignParams,
    base: &LmiSettings,
    escalate: bool,
) -> Result<CodesignResult, DcmgError> {
    mg.validate()?;
    params.validate(mg)?;
    let settings = params.settings(base);
    if let Some((i, d)) = local.dgs.iter().enumerate().find(|(_, d)| !(d.nu < 0.0)) {
        return Err(DcmgError::Assumption(format!("DG {i} has nu = {} but must be strictly non-passive", d.nu)));
    }
    // Lines at the passivity boundary are moved to ν̄ = -nudge.
    let mut local = local.clone();
    let mut notes = Vec::new();
    for (l, line) in local.lines.iter_mut().enumerate() {
        if !(line.nu_bar < 0.0) {
            let c = line_indices(&mg.lines[l], -params.nu_bar_nudge, Some(mg.lines[l].r_l), &settings)?
                .certified()
                .ok_or_else(|| DcmgError::Infeasible { stage: "global design", reason: format!("line {l} nudge") })?;
            *line = LineLocal { nu_bar: -params.nu_bar_nudge, rho_bar: c.rho().expect("IF-OFP"), p_bar: c.storage[(0, 0)] };
            notes.push(format!("line {l} nudged to nu_bar = {}", -params.nu_bar_nudge));
        }
    }
    let mut eta = params.eta_slack;
    let mut tried = Vec::new();
    loop {
        match design_global_at(mg, &local, params, &settings, eta)? {
            Ok(mut r) => {
                let mut d = notes.clone();
                d.extend(tried.iter().map(|(e, m): &(f64, String)| format!("eta = {e:.1e} failed: {m}")));
                d.extend(r.diagnostics.drain(..));
                r.diagnostics = d;
                return Ok(r);
            }
            Err(msg) => {
                tried.push((eta, msg.clone()));
                let next = if eta > 0.0 { eta * 10.0 } else { 1e-4 };
                if !escalate || next > params.eta_max * (1.0 + 1e-12) {
                    let log: Vec<String> = tried.iter().map(|(e, m)| format!("eta = {e:.1e}: {m}")).collect();
                    return Err(DcmgError::Infeasible { stage: "global design", reason: log.join("; ") });
                }
                eta = next;
            }
        }
    }
}
