use approx::assert_relative_eq;
use dcmg::codesign::*;
use dcmg::dissipativity::*;
use dcmg::model::*;
use dcmg::DcmgError;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn settings() -> LmiSettings {
    LmiSettings::default()
}

fn single() -> MicrogridSpec {
    MicrogridSpec::reference(&PhysicalTopology::new(1, vec![]).unwrap(), None, 0.0)
}

fn pair() -> MicrogridSpec {
    MicrogridSpec::reference(&PhysicalTopology::new(2, vec![(0, 1)]).unwrap(), None, 0.0)
}

fn hurwitz(a: &DMatrix<f64>) -> bool {
    a.clone().complex_eigenvalues().iter().all(|e| e.re < 0.0)
}

const GOOD: PairIndices = PairIndices { nu: -1.0, rho: 2.0, nu_bar: -1.0, rho_bar: 3.0 };

#[test]
fn scalar_conditions_hold_at_a_known_point() {
    let c = scalar_necessary_conditions(&GOOD, 1.0, 1.0, 10.0, 1.0);
    assert!(c.all(), "{:?}", c.list());
}

#[test]
fn each_scalar_condition_can_fail() {
    let cases = [
        (PairIndices { nu: 0.0, ..GOOD }, 0),
        (PairIndices { nu: -20.0, ..GOOD }, 0),
        (PairIndices { rho: 0.5, ..GOOD }, 1),
        (PairIndices { rho_bar: 0.9, ..GOOD }, 3),
        (PairIndices { nu_bar: -3.0, ..GOOD }, 5),
        (PairIndices { nu_bar: 0.0, ..GOOD }, 5),
    ];
    for (ix, which) in cases {
        let c = scalar_necessary_conditions(&ix, 1.0, 1.0, 10.0, 1.0);
        let list = c.list();
        assert!(!list[which].1, "{ix:?} should fail '{}'", list[which].0);
    }
    // γ̃ small enough to break p/(4γ̃) < ρ
    let c = scalar_necessary_conditions(&GOOD, 1.0, 1.0, 0.1, 1.0);
    assert!(!c.rho_over_gamma);
    // coupling term: p/(2C_t) large against ρ̄
    let c = scalar_necessary_conditions(&GOOD, 1.0, 1.0, 10.0, 0.01);
    assert!(!c.rho_bar_over_coupling);
}

#[test]
fn passive_dg_breaks_the_matrix_condition() {
    let ix = PairIndices { nu: 0.0, ..GOOD };
    let m = necessary_matrix(&ix, 1.0, 1.0, 10.0, -1.0, 1.0);
    assert_eq!(m.clone(), m.transpose());
    assert!(m.symmetric_eigenvalues().min() <= 0.0);
}

#[test]
fn matrix_verdicts_cover_every_incidence() {
    let mg = MicrogridSpec::reference(&PhysicalTopology::new(3, vec![(0, 1), (1, 2)]).unwrap(), None, 0.0);
    let v = necessary_condition_matrices(&mg, &[(-1.0, 2.0); 3], &[(-1.0, 3.0); 2], &[1.0; 3], &[1.0; 2], &[10.0; 3]).unwrap();
    let pairs: Vec<_> = v.iter().map(|x| (x.dg, x.line)).collect();
    assert_eq!(pairs, vec![(0, 0), (1, 0), (1, 1), (2, 1)]);
    for x in &v {
        assert_eq!(x.pd, x.min_eig > 0.0);
    }
    assert!(necessary_condition_matrices(&mg, &[(-1.0, 2.0); 2], &[(-1.0, 3.0); 2], &[1.0; 3], &[1.0; 2], &[10.0; 3]).is_err());
}

#[test]
fn chord_lies_below_the_curve() {
    let (p, pb, lo, gb) = (0.1, 0.01, 0.01, 1000.0);
    let (m, c) = nu_bar_chord(p, pb, lo, gb).unwrap();
    let f = |r: f64| -p / (pb * r);
    let hi = p.min(4.0 * gb / p);
    assert_relative_eq!(m * lo + c, f(lo), max_relative = 1e-12);
    assert_relative_eq!(m * hi + c, f(hi), max_relative = 1e-12);
    for k in 0..=200 {
        let r = lo + (hi - lo) * k as f64 / 200.0;
        assert!(m * r + c <= f(r) + 1e-9 * f(r).abs());
    }
    assert!(nu_bar_chord(p, pb, 0.0, gb).is_err());
    assert!(nu_bar_chord(p, pb, 1.0, gb).is_err());
}

#[test]
fn single_dg_joint_design() {
    let mg = single();
    let params = DesignParams { gamma_bar: 1e6, ..DesignParams::defaults(&mg, None) };
    let d = design_local(&mg, &params, &settings()).expect("single DG is feasible");
    assert_eq!(d.method, LocalMethod::Joint);
    assert!(d.lines.is_empty() && d.xi.is_empty());
    let dg = &d.dgs[0];
    let (a, b, _) = dg_state_matrices(&mg.dgs[0]);
    assert!(hurwitz(&(&a + &b * &dg.gain)));
    assert!(dg.nu < 0.0 && dg.rho_tilde > 0.0);
    assert!(dg.gamma_tilde <= 1e6);
}

#[test]
fn tiny_gamma_bar_is_reported_infeasible() {
    let mg = pair();
    let params = DesignParams { gamma_bar: 1e-6, ..DesignParams::defaults(&mg, None) };
    match design_local(&mg, &params, &settings()) {
        Err(DcmgError::Infeasible { reason, .. }) => assert!(reason.contains("gamma_bar"), "{reason}"),
        other => panic!("expected infeasible, got {other:?}"),
    }
    match design_local_decoupled(&mg, &params, &settings()) {
        Err(DcmgError::Infeasible { reason, .. }) => assert!(reason.contains("gamma_bar"), "{reason}"),
        other => panic!("expected infeasible, got {other:?}"),
    }
}

#[test]
fn decoupled_design_round_trips() {
    let topo = random_geometric_topology(4, 0.6, 0).unwrap();
    let mg = MicrogridSpec::reference(&topo.topology, Some(0), 0.2);
    let params = DesignParams::defaults(&mg, Some(&topo.distances));
    let d = design_local_decoupled(&mg, &params, &settings()).unwrap();
    assert_eq!(d.method, LocalMethod::Decoupled);
    assert_eq!((d.dgs.len(), d.lines.len()), (4, mg.n_lines()));
    for (i, dg) in d.dgs.iter().enumerate() {
        assert_eq!(dg.nu, params.local_nu);
        let (a, b, _) = dg_state_matrices(&mg.dgs[i]);
        let acl = &a + &b * &dg.gain;
        assert!(hurwitz(&acl));
        let i3 = DMatrix::identity(3, 3);
        let x = SupplyRate::if_ofp(dg.nu, dg.rho(), 3);
        assert!(analyze_xeid(&acl, &i3, &i3, &DMatrix::zeros(3, 3), &x, &settings()).unwrap().is_certified());
        assert!(dg.gamma_tilde >= -params.p[i] * dg.nu);
        assert!(dg.gamma_tilde <= params.gamma_bar);
    }
    for (l, line) in d.lines.iter().enumerate() {
        assert!(line.nu_bar < 0.0);
        assert!(line.rho_bar <= mg.lines[l].r_l * (1.0 + 1e-12));
    }
    assert_eq!(local_necessary_verdicts(&mg, &d, &params).unwrap().len(), 2 * mg.n_lines());
}

fn laplacian_gains(kk: &DMatrix<f64>, i_n: &DVector<f64>, l_t: &[f64]) -> DMatrix<f64> {
    let n = i_n.len();
    let ki = DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            (0..n).filter(|&m| m != i).map(|m| kk[(i, m)]).sum::<f64>() / (l_t[i] * i_n[i])
        } else {
            -kk[(i, j)] / (i_n[j] * l_t[i])
        }
    });
    embed_current_gains(&ki)
}

#[test]
fn topology_recovery() {
    let i_n = DVector::from_vec(vec![2.0, 4.0]);
    let l_t = [0.01, 0.02];
    let empty = extract_topology(&DMatrix::zeros(6, 6), &i_n, &l_t, 1e-6, 1e-9).unwrap();
    assert!(empty.links.is_empty());
    assert_eq!(empty.max_gain(), 0.0);

    let kk = DMatrix::from_row_slice(2, 2, &[0.0, 1.5, 0.0, 0.0]);
    let k = laplacian_gains(&kk, &i_n, &l_t);
    check_gain_structure(&k, &i_n, 1e-9).unwrap();
    let g = extract_topology(&k, &i_n, &l_t, 1e-6, 1e-9).unwrap();
    assert_eq!(g.links.len(), 1);
    assert!(g.has_link(1, 0) && !g.has_link(0, 1));
    assert_relative_eq!(g.links[0].gain, 1.5, max_relative = 1e-12);
    assert_relative_eq!(g.max_gain(), 1.5, max_relative = 1e-12);

    let mut bad = k.clone();
    bad[(0, 3)] = 1.0;
    assert!(matches!(extract_topology(&bad, &i_n, &l_t, 1e-6, 1e-9), Err(DcmgError::Structure(_))));
    let mut bad = k.clone();
    bad[(1, 1)] += 10.0;
    assert!(matches!(extract_topology(&bad, &i_n, &l_t, 1e-6, 1e-9), Err(DcmgError::Structure(_))));
    assert!(extract_topology(&DMatrix::zeros(3, 3), &i_n, &l_t, 1e-6, 1e-9).is_err());
}

#[test]
fn link_masks_and_costs() {
    let mg = MicrogridSpec::reference(&PhysicalTopology::new(3, vec![(0, 1), (1, 2)]).unwrap(), None, 0.0);
    let hard = allowed_links(&mg, GraphMode::Hard);
    assert_eq!(hard, vec![vec![true, true, false], vec![true, true, true], vec![false, true, true]]);
    assert!(allowed_links(&mg, GraphMode::Soft).iter().flatten().all(|x| *x));
    let mut params = DesignParams::defaults(&mg, None);
    assert_eq!(effective_costs(&mg, &params)[0][2], 1.0);
    params.graph_mode = GraphMode::Hard;
    assert!(effective_costs(&mg, &params).iter().flatten().all(|c| *c == 0.0));

    let d = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 2.0, 1.0, 0.0, 1.0, 2.0, 1.0, 0.0]);
    let p = DesignParams::defaults(&mg, Some(&d));
    assert_eq!(p.c_link[0][2], 2.0);
    assert_eq!(p.c_link[0][1], 1.5);
    assert_eq!(p.c_link[1][1], 0.0);
}

#[test]
fn params_validation() {
    let mg = pair();
    let good = DesignParams::defaults(&mg, None);
    good.validate(&mg).unwrap();
    assert!(DesignParams { p: vec![0.1], ..good.clone() }.validate(&mg).is_err());
    assert!(DesignParams { gamma_bar: 0.0, ..good.clone() }.validate(&mg).is_err());
    assert!(DesignParams { local_nu: 0.0, ..good.clone() }.validate(&mg).is_err());
    let mut c = good.clone();
    c.c_link[0][0] = 1.0;
    assert!(c.validate(&mg).is_err());
}

#[test]
fn single_dg_global_design_has_no_links() {
    let mg = single();
    let params = DesignParams::defaults(&mg, None);
    let local = design_local_decoupled(&mg, &params, &settings()).unwrap();
    let r = design_global(&mg, &local, &params, &settings(), true).unwrap();
    assert!(r.q.amax() < 1e-9, "{}", r.q);
    assert!(r.k.amax() < 1e-6);
    assert!(r.comm.links.is_empty());
    assert!(r.gamma > 0.0);
}

#[test]
fn hard_mode_respects_the_physical_graph() {
    let mg = MicrogridSpec::reference(&PhysicalTopology::new(3, vec![(0, 1), (1, 2)]).unwrap(), None, 0.0);
    let params = DesignParams { graph_mode: GraphMode::Hard, ..DesignParams::defaults(&mg, None) };
    let local = design_local_decoupled(&mg, &params, &settings()).unwrap();
    let r = design_global(&mg, &local, &params, &settings(), true).unwrap();
    assert_eq!(r.mode, GraphMode::Hard);
    assert!(!r.comm.has_link(0, 2) && !r.comm.has_link(2, 0));
    assert_eq!(r.comm.k[(0, 2)], 0.0);
    assert_eq!(r.approximate, r.slack_trace > 1e-7);
    check_gain_structure(&r.k, &mg.rated_currents(), 1e-6).unwrap();
    assert_relative_eq!(r.gamma, r.gamma_tilde.sqrt(), max_relative = 1e-9);
    let costs = effective_costs(&mg, &params);
    assert_relative_eq!(codesign_objective(&r, &costs, params.c1, params.alpha_slack), r.objective, max_relative = 1e-9);
}

#[test]
fn global_design_rejects_passive_local_design() {
    let mg = pair();
    let params = DesignParams::defaults(&mg, None);
    let mut local = design_local_decoupled(&mg, &params, &settings()).unwrap();
    local.dgs[1].nu = 0.0;
    assert!(matches!(design_global(&mg, &local, &params, &settings(), false), Err(DcmgError::Assumption(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn matrix_condition_implies_scalar_conditions(
        nu in -5.0f64..0.5, rho in 0.0f64..50.0, nu_bar in -5.0f64..0.5, rho_bar in 0.0f64..50.0,
        p in 0.01f64..5.0, pb in 0.01f64..5.0, g in 0.01f64..50.0, c_t in 0.1f64..5.0,
    ) {
        let ix = PairIndices { nu, rho, nu_bar, rho_bar };
        let m = necessary_matrix(&ix, p, pb, g, -1.0 / c_t, 1.0);
        if m.symmetric_eigenvalues().min() > 0.0 {
            let c = scalar_necessary_conditions(&ix, p, pb, g, c_t);
            prop_assert!(c.all(), "{:?}", c.list());
        }
    }

    #[test]
    fn consensus_gains_vanish_at_proportional_sharing(
        k01 in -5.0f64..5.0, k02 in -5.0f64..5.0, k10 in -5.0f64..5.0, k12 in -5.0f64..5.0,
        k20 in -5.0f64..5.0, k21 in -5.0f64..5.0, share in 0.0f64..1.0,
    ) {
        let kk = DMatrix::from_row_slice(3, 3, &[0.0, k01, k02, k10, 0.0, k12, k20, k21, 0.0]);
        let i_n = DVector::from_vec(vec![1.5, 2.0, 3.0]);
        let l_t = [0.01, 0.012, 0.009];
        let k = laplacian_gains(&kk, &i_n, &l_t);
        let mut x = DVector::from_vec(vec![48.0, 0.0, 0.3, 47.0, 0.0, -0.1, 49.0, 0.0, 2.0]);
        for i in 0..3 {
            x[3 * i + 1] = share * i_n[i];
        }
        prop_assert!((&k * x).amax() < 1e-9);
    }
}
