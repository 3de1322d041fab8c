use lmi_core::{
    check_psd, check_psd_schur, min_eigenvalue, smat, svec, AffineMatrixExpr as E, LmiProblem,
    SolveOptions,
};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sym(n: usize, rng: &mut ChaCha8Rng, scale: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-scale..scale));
    (&a + a.transpose()) * 0.5
}

fn ulps(a: f64, b: f64) -> u64 {
    if a == b {
        return 0;
    }
    (a.to_bits() as i64 - b.to_bits() as i64).unsigned_abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn svec_round_trip_within_one_ulp(seed in any::<u64>(), n in 1usize..8, e in -20i32..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sym(n, &mut rng, 2f64.powi(e));
        let back = smat(&svec(&s).unwrap()).unwrap();
        for i in 0..n {
            prop_assert_eq!(back[(i, i)].to_bits(), s[(i, i)].to_bits());
            for j in 0..n {
                prop_assert!(ulps(back[(i, j)], s[(i, j)]) <= 1);
            }
        }
    }

    #[test]
    fn svec_preserves_inner_products(seed in any::<u64>(), n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = sym(n, &mut rng, 1.0);
        let t = sym(n, &mut rng, 1.0);
        let lhs = svec(&s).unwrap().dot(&svec(&t).unwrap());
        let rhs = (&s * &t).trace();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + rhs.abs()));
    }

    #[test]
    fn affine_evaluation_commutes_with_midpoint(seed in any::<u64>(), n in 1usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = LmiProblem::new();
        let x = p.symmetric("X", n);
        let r = p.rect("R", n, 2);
        let t = p.scalar("t");
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let c = DMatrix::from_fn(2, n, |_, _| rng.random_range(-1.0..1.0));
        let expr = E::var(x).lmul(&a).he()
            + E::scaled_identity(t, n)
            + E::var(r).rmul(&c).he()
            + E::constant(sym(n, &mut rng, 3.0));
        let draw = |rng: &mut ChaCha8Rng| {
            (sym(n, rng, 5.0),
             DMatrix::from_fn(n, 2, |_, _| rng.random_range(-5.0..5.0)),
             DMatrix::from_element(1, 1, rng.random_range(-5.0..5.0)))
        };
        let v1 = draw(&mut rng);
        let v2 = draw(&mut rng);
        let mid = ((&v1.0 + &v2.0) * 0.5, (&v1.1 + &v2.1) * 0.5, (&v1.2 + &v2.2) * 0.5);
        let ev = |v: &(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)| expr.eval(|vr| {
            if *vr == x { v.0.clone() } else if *vr == r { v.1.clone() } else { v.2.clone() }
        });
        let lhs = ev(&mid);
        let rhs = (ev(&v1) + ev(&v2)) * 0.5;
        // Equal up to floating-point rounding of the products.
        let scale = 1.0 + lhs.amax();
        prop_assert!((lhs - rhs).amax() <= 1e-13 * scale);
    }
}

#[test]
fn schur_path_agrees_with_eigenvalues_on_1000_blocks() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut agree = 0;
    let mut psd_seen = 0;
    while agree < 1000 {
        let k = rng.random_range(1..5);
        let r = rng.random_range(1..5);
        let g = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
        let p = &g * g.transpose() + DMatrix::identity(k, k) * 0.1;
        let q = DMatrix::from_fn(k, r, |_, _| rng.random_range(-1.0..1.0));
        let base = q.transpose() * p.clone().cholesky().unwrap().solve(&q);
        let c = sym(r, &mut rng, 1.0) + DMatrix::identity(r, r) * rng.random_range(-0.5..1.5);
        let rr = &base + &c;
        let mut m = DMatrix::zeros(k + r, k + r);
        m.view_mut((0, 0), (k, k)).copy_from(&p);
        m.view_mut((0, k), (k, r)).copy_from(&q);
        m.view_mut((k, 0), (r, k)).copy_from(&q.transpose());
        m.view_mut((k, k), (r, r)).copy_from(&rr);
        let m = (&m + m.transpose()) * 0.5;
        // Skip draws that sit on the boundary to rounding precision.
        if min_eigenvalue(&c).abs() < 1e-9 {
            continue;
        }
        for strict in [false, true] {
            let e = check_psd(&m, strict, 0.0).unwrap();
            let s = check_psd_schur(&m, k, strict, 0.0).unwrap();
            assert_eq!(e, s, "disagreement on {m}");
        }
        if check_psd(&m, false, 0.0).unwrap() {
            psd_seen += 1;
        }
        agree += 1;
    }
    assert!(psd_seen > 100 && psd_seen < 900, "sample mix {psd_seen}");
}

/// Random Lyapunov-type problems with a known feasible point; every
/// constraint of each returned solution is re-checked independently.
#[test]
fn solver_soundness_on_1000_constraint_evaluations() {
    let opts = SolveOptions::default();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut checked = 0;
    let mut problems = 0;
    while checked < 1000 {
        let n = rng.random_range(1..5);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-2.0..2.0));
        let shift = min_eigenvalue(&(-(&b + b.transpose()) * 0.5));
        let a = &b + DMatrix::identity(n, n) * (shift - rng.random_range(0.5..2.0));
        let g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let q = &g * g.transpose() * 0.1;

        let mut p = LmiProblem::new();
        let x = p.symmetric("P", n);
        let t = p.scalar_bounded("t", Some(0.0), Some(1e4));
        let lyap = E::var(x).lmul(&a.transpose()).he();
        p.pd("stability", -lyap - E::constant(q.clone()), 1e-6).unwrap();
        p.psd("P>=I", E::var(x) - E::identity(n)).unwrap();
        p.psd("t>=P", E::scaled_identity(t, n) - E::var(x)).unwrap();
        let mut obj = E::var(t);
        if rng.random_bool(0.5) {
            obj = obj + E::var(x).trace().scale(rng.random_range(0.0..1.0));
        }
        p.minimize(obj).unwrap();
        let sol = p.solve(&opts).unwrap();
        assert!(sol.status.is_ok(), "problem {problems}: {:?} {}", sol.status, sol.note);
        for c in p.constraints() {
            let v = sol.eval(&c.expr);
            let v = (&v + v.transpose()) * 0.5 - DMatrix::identity(n, n) * c.margin();
            assert!(check_psd(&v, false, 10.0 * opts.feas_tol).unwrap(), "{} violated", c.name);
            checked += 1;
        }
        let tv = sol.scalar(&t);
        assert!((-10.0 * opts.feas_tol..=1e4 + 10.0 * opts.feas_tol).contains(&tv));
        checked += 1;
        problems += 1;
    }
    let _ = DVector::<f64>::zeros(0);
}
