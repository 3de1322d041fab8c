use dcmg::codesign::GraphMode;
use dcmg::model::{random_geometric_topology, MicrogridSpec};
use dcmg::sim::{Event, InitialState};
use dcmg::DcmgError;
use dcmg_cli::config::*;
use dcmg_cli::CliError;

#[test]
fn defaults_are_valid() {
    let c = RunConfig::default();
    c.validate().unwrap();
    let names: Vec<String> = c.scenarios().unwrap().into_iter().map(|s| s.name).collect();
    assert_eq!(names, ["layers", "loads", "noise"]);
    assert_eq!(c.local_choice(), LocalChoice::Auto);
    assert!(c.escalate());
}

#[test]
fn round_trip_through_toml() {
    let c = RunConfig::default();
    let back = RunConfig::from_toml(&c.to_toml()).unwrap();
    assert_eq!(back, c);
}

#[test]
fn file_overrides_base_field_by_field() {
    let mut base = RunConfig::default();
    base.design.gamma_bar = Some(5.0);
    base.design.graph_mode = Some(GraphMode::Hard);
    base.flags.droop_baseline = false;
    let c = RunConfig::layered(&base, "[design]\ngamma_bar = 20.0\n").unwrap();
    assert_eq!(c.design.gamma_bar, Some(20.0));
    assert_eq!(c.design.graph_mode, Some(GraphMode::Hard));
    assert!(!c.flags.droop_baseline);
}

#[test]
fn microgrid_stanza_is_replaced_whole() {
    let c = RunConfig::from_toml("[microgrid.generator]\nn_dgs = 10\nconnectivity = 0.45\n").unwrap();
    let g = c.microgrid.generator.unwrap();
    assert_eq!((g.n_dgs, g.topology_seed, g.param_seed, g.spread), (10, 0, None, 0.2));

    let topo = random_geometric_topology(3, 0.9, 1).unwrap().topology;
    let spec = MicrogridSpec::reference(&topo, None, 0.0);
    let mut cfg = RunConfig::default();
    cfg.microgrid = MicrogridConfig { generator: None, explicit: Some(spec.clone()) };
    let text = cfg.to_toml();
    let c = RunConfig::from_toml(&text).unwrap();
    assert!(c.microgrid.generator.is_none());
    assert_eq!(c.microgrid.explicit.unwrap(), spec);
}

#[test]
fn parse_errors() {
    let cases = [
        "this is not toml",
        "[design]\nunknown_knob = 1\n",
        "[microgrid]\n",
        "scenarios = []\n",
        "[[scenarios]]\nname = \"a\"\n",
        "[[scenarios]]\npreset = \"noise\"\n[[scenarios]]\npreset = \"noise\"\n",
        "[[scenarios]]\npreset = \"layers\"\nname = \"has space\"\n",
        "[microgrid.generator]\nn_dgs = 0\nconnectivity = 0.5\n",
    ];
    for text in cases {
        match RunConfig::from_toml(text) {
            Err(e @ CliError::Config(_)) => assert_eq!(e.exit_code(), 1),
            other => panic!("{text:?} gave {other:?}"),
        }
    }
}

#[test]
fn scenario_resolution() {
    let s = ScenarioConfig { t_end: Some(5.0), ..ScenarioConfig::preset(Preset::LoadChanges) }.resolve().unwrap();
    // the 8 s event falls outside the shortened horizon
    assert_eq!(s.events.len(), 2);
    assert_eq!(s.name, "loads");

    let text = r#"
        [[scenarios]]
        name = "step"
        t_end = 1.0
        h = 5e-5
        initial = "equilibrium"
        events = [{ t = 0.5, kind = "add_load_current", dg = 1, delta = 2.0 }]
        disturbance = { enabled = true, noise_seed = 3 }
    "#;
    let c = RunConfig::from_toml(text).unwrap();
    let s = &c.scenarios().unwrap()[0];
    assert_eq!(s.h, 5e-5);
    assert_eq!(s.initial, InitialState::Equilibrium);
    assert_eq!(s.events[0].event, Event::AddLoadCurrent { dg: Some(1), delta: 2.0 });
    assert!(s.disturbance.enabled && s.disturbance.variance.is_none());
}

#[test]
fn design_overrides_reach_the_parameters() {
    let c = RunConfig::from_toml("[design]\ngamma_bar = 50.0\ngraph_mode = \"hard\"\nc1 = 0.5\n").unwrap();
    let topo = random_geometric_topology(4, 0.6, 0).unwrap();
    let mg = MicrogridSpec::reference(&topo.topology, Some(0), 0.2);
    let p = c.design_params(&mg, Some(&topo.distances)).unwrap();
    assert_eq!((p.gamma_bar, p.graph_mode, p.c1), (50.0, GraphMode::Hard, 0.5));
    assert_eq!(p.eta_slack, 1e-4);
    let bad = RunConfig::from_toml("[design]\np = [0.1]\n").unwrap();
    assert!(bad.design_params(&mg, None).is_err());
}

#[test]
fn setpoint_options_from_band() {
    let c = RunConfig::from_toml("[setpoint]\nv_desired = 50.0\nband = 0.1\nalpha_i = 0.0\n").unwrap();
    let o = c.setpoint_options(2);
    assert_eq!(o.v_desired, vec![50.0; 2]);
    for (lo, hi) in o.v_min.iter().zip(&o.v_max) {
        approx::assert_relative_eq!(*lo, 45.0, max_relative = 1e-12);
        approx::assert_relative_eq!(*hi, 55.0, max_relative = 1e-12);
    }
    assert_eq!(o.alpha_i, 0.0);
}

#[test]
fn exit_codes() {
    let stage = |source| CliError::Stage { stage: "global design", source };
    assert_eq!(stage(DcmgError::Infeasible { stage: "x", reason: String::new() }).exit_code(), 2);
    assert_eq!(stage(DcmgError::Numerical { stage: "x", note: String::new() }).exit_code(), 2);
    assert_eq!(stage(DcmgError::Invalid(String::new())).exit_code(), 1);
    assert_eq!(stage(DcmgError::Diverged { t: 1.0, msg: String::new() }).exit_code(), 3);
    let sim = CliError::Stage { stage: "simulation", source: DcmgError::Numerical { stage: "x", note: String::new() } };
    assert_eq!(sim.exit_code(), 3);
    assert_eq!(CliError::Acceptance(2).exit_code(), 4);
    assert_eq!(CliError::Io(String::new()).exit_code(), 1);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn shortened_presets_keep_only_events_in_the_horizon(t_end in 0.1f64..12.0, which in 0usize..2) {
            let p = [Preset::Layers, Preset::LoadChanges][which];
            let full = ScenarioConfig::preset(p).resolve().unwrap();
            let s = ScenarioConfig { t_end: Some(t_end), ..ScenarioConfig::preset(p) }.resolve().unwrap();
            prop_assert!(s.events.iter().all(|e| e.t <= t_end));
            prop_assert_eq!(s.events.len(), full.events.iter().filter(|e| e.t <= t_end).count());
        }

        #[test]
        fn layering_a_config_over_itself_is_a_no_op(gamma in 1.0f64..1e4, stride in 1usize..50, droop in any::<bool>()) {
            let mut c = RunConfig::default();
            c.design.gamma_bar = Some(gamma);
            c.flags.csv_stride = stride;
            c.flags.droop_baseline = droop;
            prop_assert_eq!(RunConfig::layered(&c, &c.to_toml()).unwrap(), c.clone());
            prop_assert_eq!(RunConfig::layered(&c, "").unwrap(), c);
        }
    }
}
