use dcmg::codesign::*;
use dcmg::dissipativity::LmiSettings;
use dcmg::equilibrium::*;
use dcmg::model::*;
use dcmg::sim::*;
use lmi_core::SolveOptions;
use nalgebra::DMatrix;

struct Fixture {
    mg: MicrogridSpec,
    sp: SharingSetpoint,
    local: LocalDesign,
}

fn fixture() -> Fixture {
    let mg = MicrogridSpec::reference(&PhysicalTopology::new(3, vec![(0, 1), (1, 2)]).unwrap(), Some(4), 0.2);
    let sp = optimize_reference(&mg, &SetpointOptions::defaults(3), &SolveOptions::default()).unwrap();
    let params = DesignParams::defaults(&mg, None);
    let local = design_local_decoupled(&mg, &params, &LmiSettings::default()).unwrap();
    Fixture { mg, sp, local }
}

/// A consensus gain with the Laplacian structure, on every pair.
fn consensus(mg: &MicrogridSpec, scale: f64) -> DMatrix<f64> {
    let n = mg.n();
    let i_n = mg.rated_currents();
    let kk = DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { scale * (1.0 + (i + 2 * j) as f64 / 10.0) });
    let ki = DMatrix::from_fn(n, n, |i, j| {
        let lt = mg.dgs[i].l_t;
        if i == j {
            (0..n).map(|m| kk[(i, m)]).sum::<f64>() / (lt * i_n[i])
        } else {
            -kk[(i, j)] / (i_n[j] * lt)
        }
    });
    embed_current_gains(&ki)
}

fn proposed(f: &Fixture, k: Option<&DMatrix<f64>>) -> Controller {
    Controller::Proposed(ProposedController::new(&f.mg, &f.sp, &f.local, k).unwrap())
}

fn max_dev(traj: &Trajectory, x: &[f64]) -> f64 {
    traj.x.iter().flat_map(|s| s.iter().zip(x).map(|(a, b)| (a - b).abs())).fold(0.0, f64::max)
}

#[test]
fn equilibrium_is_invariant() {
    let f = fixture();
    let k = consensus(&f.mg, 0.5);
    let traj = simulate(&f.mg, &proposed(&f, Some(&k)), &Scenario::at_equilibrium("eq", 1.0)).unwrap();
    let xe = equilibrium_state(&compute_equilibrium(&f.mg, &f.sp.v_r()).unwrap());
    assert_eq!(traj.len(), 10_001);
    assert!(max_dev(&traj, &xe) < 1e-9, "{}", max_dev(&traj, &xe));
}

#[test]
fn distributed_input_vanishes_at_the_sharing_point() {
    let f = fixture();
    let k = consensus(&f.mg, 0.5);
    let Controller::Proposed(c) = proposed(&f, Some(&k)) else { unreachable!() };
    let u = c.distributed_input(c.i_te.as_slice());
    assert!(u.iter().all(|v| v.abs() < 1e-9), "{u:?}");
    // and it does not vanish away from it
    let mut it = c.i_te.as_slice().to_vec();
    it[0] += 1.0;
    assert!(c.distributed_input(&it).iter().any(|v| v.abs() > 1e-3));
    // recovered consensus gains match the construction
    assert!((c.k[(0, 1)] - 0.5 * 1.2).abs() < 1e-12);
}

#[test]
fn noisy_runs_are_reproducible() {
    let f = fixture();
    let ctrl = proposed(&f, None);
    let mut sc = Scenario::at_equilibrium("noise", 0.2);
    sc.disturbance = DisturbanceConfig { enabled: true, variance: Some(0.5), noise_seed: 3 };
    let a = simulate(&f.mg, &ctrl, &sc).unwrap();
    let b = simulate(&f.mg, &ctrl, &sc).unwrap();
    assert_eq!(a.x, b.x);
    assert_eq!(a.w, b.w);
    sc.disturbance.noise_seed = 4;
    let c = simulate(&f.mg, &ctrl, &sc).unwrap();
    assert_ne!(a.w, c.w);
    let w: Vec<f64> = a.w[..a.len() - 1].iter().flatten().copied().collect();
    let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
    assert!((var - 0.5).abs() < 0.02, "{var}");
    assert!(a.w.last().unwrap().iter().all(|x| *x == 0.0));
}

#[test]
fn integrator_is_fourth_order() {
    let f = fixture();
    let ctrl = proposed(&f, None);
    let run = |h: f64| {
        let mut sc = Scenario::at_equilibrium("step", 0.02);
        sc.h = h;
        sc.events = vec![TimedEvent { t: 0.0, event: Event::AddLoadCurrent { dg: Some(1), delta: 2.0 } }];
        simulate(&f.mg, &ctrl, &sc).unwrap().x.last().unwrap().clone()
    };
    let (a, b, c) = (run(2e-4), run(1e-4), run(5e-5));
    let d = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
    let ratio = d(&a, &b) / d(&b, &c);
    assert!(ratio > 10.0 && ratio < 24.0, "ratio {ratio}");
}

#[test]
fn load_step_settles_back_to_the_reference() {
    let f = fixture();
    let mut sc = Scenario::at_equilibrium("step", 4.0);
    sc.events = vec![TimedEvent { t: 0.5, event: Event::AddLoadCurrent { dg: None, delta: 3.0 } }];
    let traj = simulate(&f.mg, &proposed(&f, None), &sc).unwrap();
    let win = MetricWindows {
        events: vec![0.5],
        steady: (3.5, 4.0),
        disturbed: None,
        band_center: 48.0,
        band_rel: 0.01,
    };
    let m = compute_metrics(&f.mg, &traj, &f.sp, &win).unwrap();
    assert!(m.voltage_error.iter().all(|e| e.abs() < 1e-4), "{:?}", m.voltage_error);
    let s = m.settling[0].expect("settles");
    assert!(s < 1.0, "{s}");
    assert!(m.l2_ratio.is_none());
}

#[test]
fn droop_offsets() {
    let f = fixture();
    let v_r = f.sp.v_r();
    let sc = Scenario { initial: InitialState::Equilibrium, ..Scenario::at_equilibrium("droop", 5.0) };
    for scale in [0.0, 1.0] {
        let mut params = DroopParams::defaults(&f.mg, &v_r);
        params.m.iter_mut().for_each(|m| *m *= scale);
        params.secondary_on_at = 10.0;
        let ctrl = Controller::Droop(droop_baseline(&f.mg, &v_r, params.clone()).unwrap());
        let traj = simulate(&f.mg, &ctrl, &sc).unwrap();
        let k = traj.len() - 1;
        for i in 0..3 {
            let lhs = traj.voltage(k, i) + (f.mg.dgs[i].r_t + params.m[i]) * traj.current(k, i);
            assert!((lhs - v_r[i]).abs() < 1e-3, "DG {i} scale {scale}: {lhs} vs {}", v_r[i]);
        }
        if scale > 0.0 {
            assert!(traj.voltage(k, 0) < v_r[0] - 0.5);
        }
    }
}

#[test]
fn droop_secondary_restores_the_average() {
    let f = fixture();
    let v_r = f.sp.v_r();
    let params = DroopParams { secondary_on_at: 0.0, ..DroopParams::defaults(&f.mg, &v_r) };
    let ctrl = Controller::Droop(droop_baseline(&f.mg, &v_r, params).unwrap());
    let traj = simulate(&f.mg, &ctrl, &Scenario::at_equilibrium("sec", 3.0)).unwrap();
    let dev = max_average_deviation(&traj, 2.9, 3.0, v_r.mean());
    assert!(dev < 1e-3, "{dev}");
    let early = max_average_deviation(&traj, 0.0, 0.5, v_r.mean());
    assert!(early > 0.1);
}

#[test]
fn droop_rejects_bad_parameters() {
    let f = fixture();
    let v_r = f.sp.v_r();
    let mut p = DroopParams::defaults(&f.mg, &v_r);
    p.m.pop();
    assert!(droop_baseline(&f.mg, &v_r, p).is_err());
    let p = DroopParams { ki_sec: -1.0, ..DroopParams::defaults(&f.mg, &v_r) };
    assert!(droop_baseline(&f.mg, &v_r, p).is_err());
}

fn constant_trajectory(f: &Fixture, steps: usize) -> Trajectory {
    let xe = equilibrium_state(&compute_equilibrium(&f.mg, &f.sp.v_r()).unwrap());
    let n = f.mg.n();
    Trajectory {
        n_dgs: n,
        n_lines: f.mg.n_lines(),
        t: (0..steps).map(|k| k as f64 * 1e-3).collect(),
        x: vec![xe; steps],
        u: vec![vec![0.0; n]; steps],
        w: vec![vec![0.0; 2 * n + f.mg.n_lines()]; steps],
        layers: vec![Layers::ALL; steps],
    }
}

#[test]
fn metrics_of_a_constant_trajectory() {
    let f = fixture();
    let traj = constant_trajectory(&f, 101);
    let win = MetricWindows {
        events: vec![0.02],
        steady: (0.05, 0.1),
        disturbed: Some((0.0, 0.1)),
        band_center: f.sp.v_r().mean(),
        band_rel: 0.01,
    };
    let m = compute_metrics(&f.mg, &traj, &f.sp, &win).unwrap();
    assert!(m.voltage_error.iter().all(|e| e.abs() < 1e-12));
    assert!(m.current_spread < 1e-9);
    assert!((m.sharing_ratio - f.sp.i_s_star).abs() < 1e-9);
    assert_eq!(m.settling, vec![Some(0.0)]);
    assert_eq!(m.l2_ratio, None);
    let vmax = f.sp.v_r_star.iter().map(|v| (v - win.band_center).abs()).fold(0.0, f64::max);
    assert!((m.voltage_band - vmax).abs() < 1e-12);

    let bad = MetricWindows { steady: (0.05, 0.2), ..win.clone() };
    assert!(compute_metrics(&f.mg, &traj, &f.sp, &bad).is_err());
    let bad = MetricWindows { events: vec![0.5], ..win };
    assert!(compute_metrics(&f.mg, &traj, &f.sp, &bad).is_err());
}

#[test]
fn no_dissipation_violation_at_rest() {
    let f = fixture();
    let traj = constant_trajectory(&f, 50);
    let eq = compute_equilibrium(&f.mg, &f.sp.v_r()).unwrap();
    let r = dissipation_check(&f.mg, &traj, &eq, &Certificates::from_local(&f.local)).unwrap();
    assert_eq!(r.samples, 48);
    assert_eq!(r.worst(), 0.0);
}

#[test]
fn local_certificates_hold_along_a_load_step() {
    let f = fixture();
    let mut sc = Scenario::at_equilibrium("step", 0.5);
    sc.events = vec![TimedEvent { t: 0.1, event: Event::AddLoadCurrent { dg: Some(0), delta: 3.0 } }];
    let traj = simulate(&f.mg, &proposed(&f, None), &sc).unwrap();
    let eq = compute_equilibrium(&f.mg, &f.sp.v_r()).unwrap();
    let r = dissipation_check(&f.mg, &traj, &eq, &Certificates::from_local(&f.local)).unwrap();
    assert!(r.worst() < 0.01, "{r:?}");
}

#[test]
fn layers_switch_on_at_their_events() {
    let f = fixture();
    let mut sc = Scenario::layer_activation(3.5);
    sc.events.retain(|e| e.t <= sc.t_end);
    let traj = simulate(&f.mg, &proposed(&f, None), &sc).unwrap();
    assert_eq!(traj.layers[traj.index_at(0.5)], Layers::NONE);
    assert!(traj.layers[traj.index_at(1.0)].steady);
    assert!(!traj.layers[traj.index_at(2.9)].local);
    assert!(traj.layers[traj.index_at(3.0)].local);
    assert!(traj.x[0].iter().all(|x| *x == 0.0));
    // inputs are exactly zero before the first layer
    assert!(traj.u[traj.index_at(0.9)].iter().all(|u| *u == 0.0));
}

#[test]
fn scenario_validation() {
    let f = fixture();
    let ctrl = proposed(&f, None);
    let mut sc = Scenario::at_equilibrium("bad", 1.0);
    sc.events = vec![
        TimedEvent { t: 0.5, event: Event::ActivateLocal },
        TimedEvent { t: 0.2, event: Event::ActivateSteady },
    ];
    assert!(simulate(&f.mg, &ctrl, &sc).is_err());
    sc.events = vec![TimedEvent { t: 0.5, event: Event::SetLoadCurrent { dg: Some(7), value: 1.0 } }];
    assert!(simulate(&f.mg, &ctrl, &sc).is_err());
    sc.events.clear();
    sc.h = 0.0;
    assert!(simulate(&f.mg, &ctrl, &sc).is_err());
    let sc = Scenario { initial: InitialState::State(vec![0.0; 3]), ..Scenario::at_equilibrium("x", 0.1) };
    assert!(simulate(&f.mg, &ctrl, &sc).is_err());
}

#[test]
fn unstable_loop_is_reported_as_divergence() {
    let f = fixture();
    let mut local = f.local.clone();
    for d in &mut local.dgs {
        d.gain = DMatrix::from_row_slice(1, 3, &[0.0, 50.0, 0.0]);
    }
    let ctrl = Controller::Proposed(ProposedController::new(&f.mg, &f.sp, &local, None).unwrap());
    let mut sc = Scenario::at_equilibrium("boom", 5.0);
    sc.events = vec![TimedEvent { t: 0.0, event: Event::AddLoadCurrent { dg: Some(0), delta: 1.0 } }];
    assert!(matches!(simulate(&f.mg, &ctrl, &sc), Err(dcmg::DcmgError::Diverged { .. })));
}

#[test]
fn csv_layout() {
    let f = fixture();
    let traj = simulate(&f.mg, &proposed(&f, None), &Scenario::at_equilibrium("csv", 0.001)).unwrap();
    let mut buf = Vec::new();
    traj.write_csv(&mut buf, &["seed 4".to_string()], 1).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("# seed 4"));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let (n, nl) = (3, 2);
    assert_eq!(header.len(), 1 + 3 * n + nl + n);
    assert_eq!(header[0], "t");
    assert_eq!(lines.count(), traj.len());
    let mut buf = Vec::new();
    traj.write_csv(&mut buf, &[], 3).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let times: Vec<&str> = text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    // samples 0, 3, 6, 9 and the final 10
    assert_eq!(times.len(), 5);
    assert_eq!(times[4], format!("{:.9e}", traj.t[10]));
}

#[test]
fn plant_rhs_at_equilibrium_is_zero() {
    let f = fixture();
    let eq = compute_equilibrium(&f.mg, &f.sp.v_r()).unwrap();
    let x = equilibrium_state(&eq);
    let w = vec![0.0; 2 * 3 + 2];
    let dx = plant_rhs(&f.mg, &Loads::nominal(&f.mg), &x, eq.u_e.as_slice(), &w);
    assert!(dx.iter().all(|d| d.abs() < 1e-9), "{dx:?}");
}
