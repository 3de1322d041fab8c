//! Equilibria, current-sharing references and steady-state inputs.

use lmi_core::{AffineMatrixExpr as Expr, LmiProblem, SolveOptions};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::model::MicrogridSpec;
use crate::{solve_checked, DcmgError, Solved};

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumPoint {
    pub v_e: DVector<f64>,
    pub i_te: DVector<f64>,
    pub i_bar_e: DVector<f64>,
    /// Integrator states; zero in error coordinates.
    pub v_int: DVector<f64>,
    pub u_e: DVector<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExistenceCheck {
    pub exists: bool,
    pub condition_number: f64,
}

/// `B R⁻¹ Bᵀ + Y_L` must be positive definite for a unique equilibrium.
pub fn check_equilibrium_existence(mg: &MicrogridSpec) -> ExistenceCheck {
    let ev = mg.conductance().symmetric_eigenvalues();
    let (lo, hi) = (ev.min(), ev.max());
    let exists = lo > 1e-12 * hi.abs().max(f64::MIN_POSITIVE);
    ExistenceCheck { exists, condition_number: if exists { hi / lo } else { f64::INFINITY } }
}

pub fn compute_equilibrium(mg: &MicrogridSpec, v_r: &DVector<f64>) -> Result<EquilibriumPoint, DcmgError> {
    let n = mg.n();
    if v_r.len() != n {
        return Err(DcmgError::Invalid(format!("expected {n} references, got {}", v_r.len())));
    }
    let g = mg.conductance();
    if !check_equilibrium_existence(mg).exists {
        return Err(DcmgError::Invalid("B R^-1 B^T + Y_L is singular; no unique equilibrium".into()));
    }
    let i_l = DVector::from_iterator(n, mg.dgs.iter().map(|d| d.i_l_bar));
    let r_t = DVector::from_iterator(n, mg.dgs.iter().map(|d| d.r_t));
    let i_te = &g * v_r + &i_l;
    let b = mg.bi_adjacency();
    let i_bar_e = DVector::from_iterator(
        mg.n_lines(),
        (0..mg.n_lines()).map(|l| (b.column(l).dot(v_r)) / mg.lines[l].r_l),
    );
    let u_e = v_r + r_t.component_mul(&i_te);
    Ok(EquilibriumPoint { v_e: v_r.clone(), i_te, i_bar_e, v_int: DVector::zeros(n), u_e })
}

/// `u_S,i = V_r,i + R_t,i I_n,i I_s`.
pub fn steady_state_inputs(mg: &MicrogridSpec, v_r: &DVector<f64>, i_s: f64) -> DVector<f64> {
    let i_n = mg.rated_currents();
    DVector::from_iterator(mg.n(), (0..mg.n()).map(|i| v_r[i] + mg.dgs[i].r_t * i_n[i] * i_s))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SetpointOptions {
    pub v_desired: Vec<f64>,
    pub v_min: Vec<f64>,
    pub v_max: Vec<f64>,
    pub alpha_v: f64,
    pub alpha_i: f64,
}

impl SetpointOptions {
    /// 48 V target with a ±5 % band and the default weights.
    pub fn defaults(n: usize) -> Self {
        let v = crate::model::V_REF;
        SetpointOptions {
            v_desired: vec![v; n],
            v_min: vec![0.95 * v; n],
            v_max: vec![1.05 * v; n],
            alpha_v: 1.0,
            alpha_i: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharingSetpoint {
    pub v_r_star: Vec<f64>,
    pub i_s_star: f64,
    pub u_s: Vec<f64>,
}

impl SharingSetpoint {
    pub fn v_r(&self) -> DVector<f64> {
        DVector::from_vec(self.v_r_star.clone())
    }

    pub fn u_s(&self) -> DVector<f64> {
        DVector::from_vec(self.u_s.clone())
    }
}

/// Range of sharing ratios compatible with the voltage band, after
/// eliminating the balance equation (`V = a I_s - b`). Each end names the
/// constraint that sets it.
#[derive(Debug, Clone, PartialEq)]
pub struct SharingInterval {
    pub lo: f64,
    pub hi: f64,
    pub lo_reason: String,
    pub hi_reason: String,
}

pub fn sharing_interval(mg: &MicrogridSpec, opts: &SetpointOptions) -> Result<SharingInterval, DcmgError> {
    let n = mg.n();
    let g = mg.conductance();
    let lu = g.clone().lu();
    let a = lu.solve(&mg.rated_currents()).ok_or_else(|| DcmgError::Invalid("singular conductance".into()))?;
    let i_l = DVector::from_iterator(n, mg.dgs.iter().map(|d| d.i_l_bar));
    let b = lu.solve(&i_l).ok_or_else(|| DcmgError::Invalid("singular conductance".into()))?;
    let mut out = SharingInterval {
        lo: 0.0,
        hi: 1.0,
        lo_reason: "I_s >= 0".into(),
        hi_reason: "I_s <= 1 (load exceeds rated capacity)".into(),
    };
    for i in 0..n {
        // V_min <= a_i I_s - b_i <= V_max
        let lo_v = (opts.v_min[i] + b[i]) / a[i];
        let hi_v = (opts.v_max[i] + b[i]) / a[i];
        let (l, h, ln, hn) = if a[i] > 0.0 {
            (lo_v, hi_v, format!("V_{i} >= V_min"), format!("V_{i} <= V_max"))
        } else {
            (hi_v, lo_v, format!("V_{i} <= V_max"), format!("V_{i} >= V_min"))
        };
        if l > out.lo {
            out.lo = l;
            out.lo_reason = ln;
        }
        if h < out.hi {
            out.hi = h;
            out.hi_reason = hn;
        }
    }
    Ok(out)
}

/// Minimizes `α_V‖V_r − V̄‖² + α_I I_s` subject to the sharing balance
/// `I_n I_s − (B R⁻¹ Bᵀ + Y_L) V_r = Ī_L`, the voltage band and `0 ≤ I_s ≤ 1`.
pub fn optimize_reference(
    mg: &MicrogridSpec,
    opts: &SetpointOptions,
    solver: &SolveOptions,
) -> Result<SharingSetpoint, DcmgError> {
    let n = mg.n();
    if opts.v_desired.len() != n || opts.v_min.len() != n || opts.v_max.len() != n {
        return Err(DcmgError::Invalid(format!("setpoint vectors must have length {n}")));
    }
    if opts.v_min.iter().zip(&opts.v_max).any(|(a, b)| a > b) {
        return Err(DcmgError::Invalid("V_min exceeds V_max".into()));
    }
    if !(opts.alpha_v > 0.0 && opts.alpha_i >= 0.0) {
        return Err(DcmgError::Invalid("weights must satisfy alpha_V > 0, alpha_I >= 0".into()));
    }
    if !check_equilibrium_existence(mg).exists {
        return Err(DcmgError::Invalid("B R^-1 B^T + Y_L is singular; no unique equilibrium".into()));
    }
    let iv = sharing_interval(mg, opts)?;
    if iv.lo > iv.hi {
        return Err(DcmgError::Infeasible {
            stage: "setpoint optimization",
            reason: format!(
                "'{}' requires I_s >= {:.6} but '{}' requires I_s <= {:.6}",
                iv.lo_reason, iv.lo, iv.hi_reason, iv.hi
            ),
        });
    }

    // Work in deviations d = V_r − V̄ for conditioning.
    let vbar = DVector::from_vec(opts.v_desired.clone());
    let g = mg.conductance();
    let mut prob = LmiProblem::new();
    let dv: Vec<_> = (0..n)
        .map(|i| {
            prob.scalar_bounded(
                &format!("dV{i}"),
                Some(opts.v_min[i] - vbar[i]),
                Some(opts.v_max[i] - vbar[i]),
            )
        })
        .collect();
    let isv = prob.scalar_bounded("I_s", Some(0.0), Some(1.0));
    let tv = prob.scalar("t");
    let mut d = Expr::zeros(n, 1);
    for (i, v) in dv.iter().enumerate() {
        d = d + Expr::var(*v).embed(n, 1, i, 0);
    }
    let i_l = DVector::from_iterator(n, mg.dgs.iter().map(|d| d.i_l_bar));
    let rhs = &i_l + &g * &vbar;
    let balance = Expr::scaled(isv, DMatrix::from_column_slice(n, 1, mg.rated_currents().as_slice()))
        - d.lmul(&g)
        - Expr::constant(DMatrix::from_column_slice(n, 1, rhs.as_slice()));
    prob.eq_zero("sharing balance", balance)?;
    let epi = Expr::block(
        &[
            vec![Some(Expr::identity(n)), Some(d.clone())],
            vec![Some(d.transpose()), Some(Expr::var(tv))],
        ],
        &[n, 1],
        &[n, 1],
    )?;
    prob.psd("deviation epigraph", epi)?;
    prob.minimize(Expr::var(tv).scale(opts.alpha_v) + Expr::var(isv).scale(opts.alpha_i))?;
    let sol = match solve_checked(&prob, solver, "setpoint optimization")? {
        Solved::Ok(s) => s,
        Solved::Infeasible(note) => {
            return Err(DcmgError::Infeasible {
                stage: "setpoint optimization",
                reason: format!("{note}; binding: '{}' vs '{}'", iv.lo_reason, iv.hi_reason),
            })
        }
    };
    let i_s = sol.scalar(&isv);
    let v_r = DVector::from_iterator(n, (0..n).map(|i| vbar[i] + sol.scalar(&dv[i])));
    let u_s = steady_state_inputs(mg, &v_r, i_s);
    Ok(SharingSetpoint { v_r_star: v_r.as_slice().to_vec(), i_s_star: i_s, u_s: u_s.as_slice().to_vec() })
}

/// Relative residual of the sharing balance at a setpoint.
pub fn sharing_residual(mg: &MicrogridSpec, sp: &SharingSetpoint) -> f64 {
    let n = mg.n();
    let i_l = DVector::from_iterator(n, mg.dgs.iter().map(|d| d.i_l_bar));
    let r = mg.rated_currents() * sp.i_s_star - mg.conductance() * sp.v_r() - &i_l;
    r.amax() / i_l.amax().max(1.0)
}
