use approx::assert_relative_eq;
use lmi_core::{check_psd, AffineMatrixExpr as E, LmiProblem, SolveOptions, SolveStatus};
use nalgebra::{dmatrix, DMatrix};

fn opts() -> SolveOptions {
    SolveOptions::default()
}

fn lyapunov(a: f64) -> SolveStatus {
    let mut p = LmiProblem::new();
    let x = p.scalar("P");
    p.pd("P>0", E::var(x), 1e-6).unwrap();
    p.psd("-2AP>=0", E::var(x).scale(-2.0 * a)).unwrap();
    p.solve(&opts()).unwrap().status
}

#[test]
fn scalar_lyapunov_stable_is_feasible() {
    assert_eq!(lyapunov(-1.0), SolveStatus::Feasible);
}

#[test]
fn scalar_lyapunov_unstable_is_infeasible() {
    assert_eq!(lyapunov(1.0), SolveStatus::Infeasible);
}

/// max ρ̄ s.t. [[2P̄R/L − ρ̄, −P̄/L + ½], [⋆, −ν̄]] ⪰ 0, P̄ > 0.
fn line_problem(r: f64, l: f64, nu: f64) -> (f64, f64, SolveStatus) {
    let mut p = LmiProblem::new();
    let pb = p.scalar("Pbar");
    let rho = p.scalar("rho");
    let m = E::scaled(pb, dmatrix![2.0 * r / l, -1.0 / l; -1.0 / l, 0.0])
        - E::scaled(rho, dmatrix![1.0, 0.0; 0.0, 0.0])
        + E::constant(dmatrix![0.0, 0.5; 0.5, -nu]);
    p.psd("line", m).unwrap();
    p.pd("Pbar>0", E::var(pb), 1e-6).unwrap();
    p.maximize(E::var(rho)).unwrap();
    let s = p.solve(&opts()).unwrap();
    (s.scalar(&rho), s.scalar(&pb), s.status)
}

#[test]
fn line_passivity_index_at_zero_nu() {
    let (rho, pb, st) = line_problem(0.02, 0.01, 0.0);
    assert_eq!(st, SolveStatus::Optimal);
    assert_relative_eq!(rho, 0.02, max_relative = 1e-6);
    assert_relative_eq!(pb, 0.005, max_relative = 1e-6);
}

#[test]
fn line_passivity_with_negative_nu_exceeds_resistance() {
    // ρ̄ = R + R²|ν̄| from the 2x2 determinant.
    let (rho, _, st) = line_problem(0.02, 0.01, -1e-4);
    assert_eq!(st, SolveStatus::Optimal);
    assert_relative_eq!(rho, 0.02 + 0.0004 * 1e-4, max_relative = 1e-6);
}

#[test]
fn symmetric_variable_lyapunov_and_soundness() {
    // Find P ⪰ I with AᵀP + PA ⪯ -I for a stable 2x2 A, minimize trace.
    let a = dmatrix![-1.0, 2.0; 0.0, -3.0];
    let mut p = LmiProblem::new();
    let x = p.symmetric("P", 2);
    let lyap = E::var(x).lmul(&a.transpose()) + E::var(x).rmul(&a);
    p.psd("lyap", -lyap - E::identity(2)).unwrap();
    p.psd("P>=I", E::var(x) - E::identity(2)).unwrap();
    p.minimize(E::var(x).trace()).unwrap();
    let s = p.solve(&opts()).unwrap();
    assert_eq!(s.status, SolveStatus::Optimal, "{}", s.note);
    for c in p.constraints() {
        let v = s.eval(&c.expr) - DMatrix::identity(2, 2) * c.margin();
        assert!(check_psd(&v, false, 10.0 * opts().feas_tol).unwrap());
    }
    // Independent oracle: the minimal-trace solution of this problem is P
    // solving AᵀP + PA = -I when that P ⪰ I; compare objective against it.
    let p_lyap = lyap_solve(&a);
    let tr_lower = p_lyap.trace();
    assert!(s.objective.unwrap() >= tr_lower - 1e-7);
}

fn lyap_solve(a: &DMatrix<f64>) -> DMatrix<f64> {
    // Kronecker form (I⊗Aᵀ + Aᵀ⊗I) vec(P) = -vec(I).
    let n = a.nrows();
    let at = a.transpose();
    let mut k = DMatrix::zeros(n * n, n * n);
    for i in 0..n {
        for j in 0..n {
            for p in 0..n {
                for q in 0..n {
                    let mut v = 0.0;
                    if j == q {
                        v += at[(i, p)];
                    }
                    if i == p {
                        v += at[(j, q)];
                    }
                    k[(i + n * j, p + n * q)] = v;
                }
            }
        }
    }
    let rhs = -nalgebra::DVector::from_column_slice(DMatrix::<f64>::identity(n, n).as_slice());
    let sol = k.lu().solve(&rhs).unwrap();
    DMatrix::from_column_slice(n, n, sol.as_slice())
}

#[test]
fn equality_constraints_and_masks() {
    // Masked 2x2 with only the diagonal free; force entries via equalities.
    let mut p = LmiProblem::new();
    let k = p.masked("K", 2, 2, vec![true, false, false, true]);
    p.eq_zero("k00", E::var(k).entry(0, 0) - E::constant(dmatrix![3.0])).unwrap();
    let t = p.scalar("t");
    p.psd("t>=k11", E::var(t) - E::var(k).entry(1, 1)).unwrap();
    p.psd("k11>=1", E::var(k).entry(1, 1) - E::constant(dmatrix![1.0])).unwrap();
    p.minimize(E::var(t)).unwrap();
    let s = p.solve(&opts()).unwrap();
    assert_eq!(s.status, SolveStatus::Optimal, "{}", s.note);
    let kv = s.value(&k);
    assert_eq!(kv[(0, 1)], 0.0);
    assert_eq!(kv[(1, 0)], 0.0);
    assert_relative_eq!(kv[(0, 0)], 3.0, epsilon = 1e-9);
    assert_relative_eq!(s.scalar(&t), 1.0, epsilon = 1e-7);
}

#[test]
fn bounds_are_respected() {
    let mut p = LmiProblem::new();
    let x = p.scalar_bounded("x", Some(-2.0), Some(5.0));
    p.psd("x+10>=0", E::var(x) + E::constant(dmatrix![10.0])).unwrap();
    p.maximize(E::var(x)).unwrap();
    let s = p.solve(&opts()).unwrap();
    assert_eq!(s.status, SolveStatus::Optimal);
    assert_relative_eq!(s.scalar(&x), 5.0, epsilon = 1e-7);
}

#[test]
fn unbounded_objective_is_numerical_failure() {
    let mut p = LmiProblem::new();
    let x = p.scalar("x");
    p.psd("x>=0", E::var(x)).unwrap();
    p.maximize(E::var(x)).unwrap();
    let s = p.solve(&opts()).unwrap();
    assert_eq!(s.status, SolveStatus::NumericalFailure);
}

#[test]
fn deterministic() {
    let run = || line_problem(0.03, 0.02, -0.5);
    assert_eq!(run().0.to_bits(), run().0.to_bits());
}

#[test]
fn non_symmetric_constraint_rejected() {
    let mut p = LmiProblem::new();
    let x = p.rect("X", 2, 2);
    p.psd("bad", E::var(x)).unwrap();
    assert!(p.solve(&opts()).is_err());
}

#[test]
fn no_constraints_rejected() {
    let p = LmiProblem::new();
    assert!(p.solve(&opts()).is_err());
}
