use std::path::Path;
use std::process::{Command, Output};

fn dcmg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dcmg")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_owned()
}

/// Pinned 4-DG grid with one short equilibrium scenario and no droop run.
const SHORT: &str = r#"
[flags]
droop_baseline = false

[[scenarios]]
preset = "equilibrium"
t_end = 0.3
"#;

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&dcmg(&[])), 1);
    assert_eq!(code(&dcmg(&["frobnicate"])), 1);
    assert_eq!(code(&dcmg(&["setpoint", "--mode", "sideways"])), 1);
    assert_eq!(code(&dcmg(&["--help"])), 0);
}

#[test]
fn bad_config_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[design]\nno_such_field = 3\n");
    let o = dcmg(&["setpoint", "-q", "-c", &cfg]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_field"));
    assert_eq!(code(&dcmg(&["setpoint", "-q", "-c", "/nonexistent/run.toml"])), 1);
}

#[test]
fn gen_topology_is_deterministic() {
    let a = dcmg(&["gen-topology", "--n-dgs", "6", "--connectivity", "0.5", "--seed", "3"]);
    let b = dcmg(&["gen-topology", "--n-dgs", "6", "--connectivity", "0.5", "--seed", "3"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
    let v: serde_json::Value = serde_json::from_slice(&a.stdout).unwrap();
    assert_eq!(v["n_dgs"], 6);
    assert_eq!(v["positions"].as_array().unwrap().len(), 6);
    assert!(v["edges"].as_array().unwrap().len() >= 5);
    assert!(v["provenance"][1].as_str().unwrap().contains("seed=3"));

    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("topo.json");
    let o = dcmg(&["gen-topology", "--n-dgs", "6", "--connectivity", "0.5", "--seed", "3", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert_eq!(std::fs::read(&out).unwrap(), a.stdout);
}

#[test]
fn infeasible_design_exits_2_with_a_partial_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = dcmg(&["design-local", "-q", "--gamma-bar", "1e-6", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("design.json")).unwrap()).unwrap();
    assert!(report["error"].as_str().unwrap().contains("gamma_bar"));
    assert!(report["setpoint"].is_object());
    assert!(report["local"].is_null());
}

#[test]
fn config_file_overrides_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "[design]\ngamma_bar = 1000.0\n");
    let o = dcmg(&["design-local", "-q", "--gamma-bar", "1e-6", "-c", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("design.json")).unwrap()).unwrap();
    assert_eq!(report["params"]["gamma_bar"], 1000.0);
    assert!(report["error"].is_null());
}

#[test]
fn full_run_writes_reproducible_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SHORT);
    let mut outs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        let o = dcmg(&["run", "-q", "-c", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outs.push(out);
    }
    for f in ["design.json", "traj_equilibrium.csv", "metrics.csv", "verify.txt"] {
        let a = std::fs::read(outs[0].join(f)).unwrap();
        let b = std::fs::read(outs[1].join(f)).unwrap();
        assert!(a == b, "{f} differs between runs");
    }
    let traj = std::fs::read_to_string(outs[0].join("traj_equilibrium.csv")).unwrap();
    assert!(traj.starts_with("# dcmg "));
    let header = traj.lines().find(|l| !l.starts_with('#')).unwrap();
    assert!(header.starts_with("t,"));
    let metrics = std::fs::read_to_string(outs[0].join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("# dcmg "));
    assert!(metrics.lines().any(|l| l == "scenario,metric,index,value"));
    let verify = std::fs::read_to_string(outs[0].join("verify.txt")).unwrap();
    assert!(verify.lines().last().unwrap().ends_with(" 0 failed"));
    assert!(verify.lines().any(|l| l.starts_with("PASS")));
    let design: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(outs[0].join("design.json")).unwrap()).unwrap();
    assert!(design["provenance"][0].as_str().unwrap().starts_with("dcmg "));
    assert!(design["global"]["links"].is_array());
}

#[test]
fn failed_checks_exit_4() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    // loud noise pushes the voltage band past its bound
    let cfg = write_config(
        dir.path(),
        r#"
[flags]
droop_baseline = false

[[scenarios]]
preset = "noise"
t_end = 0.5
disturbance = { enabled = true, variance = 500.0, noise_seed = 1 }
"#,
    );
    let o = dcmg(&["run", "-q", "-c", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stderr).contains("FAIL"));
    let verify = std::fs::read_to_string(out.join("verify.txt")).unwrap();
    assert!(verify.lines().any(|l| l.starts_with("FAIL")));
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    // a huge conductance makes the explicit step unstable
    let cfg = write_config(
        dir.path(),
        r#"
[flags]
droop_baseline = false

[[scenarios]]
name = "blowup"
t_end = 0.2
events = [{ t = 0.01, kind = "scale_load_conductance", factor = 1e6 }]
"#,
    );
    let o = dcmg(&["simulate", "-q", "-c", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}
