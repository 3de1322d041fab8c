//! Stage orchestration and artifact emission.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use dcmg::codesign::*;
use dcmg::dissipativity::LmiSettings;
use dcmg::equilibrium::*;
use dcmg::model::*;
use dcmg::sim::*;
use dcmg::DcmgError;
use lmi_core::SolveOptions;
use nalgebra::DMatrix;
use serde::Serialize;

use crate::config::{LocalChoice, RunConfig};
use crate::CliError;

/// Last stage to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Setpoint,
    DesignLocal,
    DesignGlobal,
    Simulate,
    Verify,
}

pub struct Network {
    pub mg: MicrogridSpec,
    pub distances: Option<DMatrix<f64>>,
    pub provenance: Vec<String>,
}

fn stage_err(stage: &'static str) -> impl Fn(DcmgError) -> CliError {
    move |source| CliError::Stage { stage, source }
}

pub fn build_network(cfg: &RunConfig) -> Result<Network, CliError> {
    let mut prov = vec![format!("dcmg {}", env!("CARGO_PKG_VERSION"))];
    let (mg, distances) = match (&cfg.microgrid.generator, &cfg.microgrid.explicit) {
        (Some(g), _) => {
            let topo = random_geometric_topology(g.n_dgs, g.connectivity, g.topology_seed).map_err(stage_err("topology"))?;
            prov.push(format!(
                "microgrid: generated n_dgs={} connectivity={} topology_seed={} param_seed={} spread={} resamples={}",
                g.n_dgs,
                g.connectivity,
                g.topology_seed,
                g.param_seed.map_or("none".to_string(), |s| s.to_string()),
                g.spread,
                topo.resamples
            ));
            (MicrogridSpec::reference(&topo.topology, g.param_seed, g.spread), Some(topo.distances))
        }
        (None, Some(spec)) => {
            prov.push("microgrid: explicit".into());
            (spec.clone(), None)
        }
        (None, None) => return Err(CliError::Config("no microgrid given".into())),
    };
    mg.validate().map_err(stage_err("topology"))?;
    for (i, d) in mg.dgs.iter().enumerate() {
        prov.push(format!(
            "DG {i}: r_t={} l_t={} c_t={} y_l={} i_l_bar={} p_n={} v_r={} sigma_v2={} sigma_c2={}",
            d.r_t, d.l_t, d.c_t, d.y_l, d.i_l_bar, d.p_n, d.v_r, d.sigma_v2, d.sigma_c2
        ));
    }
    for (l, line) in mg.lines.iter().enumerate() {
        prov.push(format!(
            "line {l}: {}->{} r_l={} l_l={} sigma_l2={}",
            line.tail, line.head, line.r_l, line.l_l, line.sigma_l2
        ));
    }
    Ok(Network { mg, distances, provenance: prov })
}

/// Joint local design, with the decoupled one as fallback for `Auto`.
pub fn local_stage(
    mg: &MicrogridSpec,
    params: &DesignParams,
    choice: LocalChoice,
    settings: &LmiSettings,
) -> Result<LocalDesign, DcmgError> {
    match choice {
        LocalChoice::Joint => design_local(mg, params, settings),
        LocalChoice::Decoupled => design_local_decoupled(mg, params, settings),
        LocalChoice::Auto => match design_local(mg, params, settings) {
            Ok(d) => Ok(d),
            Err(e @ (DcmgError::Infeasible { .. } | DcmgError::Numerical { .. })) => {
                let mut d = design_local_decoupled(mg, params, settings)?;
                d.note = format!("joint design failed ({e}); {}", d.note);
                Ok(d)
            }
            Err(e) => Err(e),
        },
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DgReport {
    pub gain: [f64; 3],
    pub nu: f64,
    pub rho: f64,
    pub rho_tilde: f64,
    pub gamma_tilde: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct LineReport {
    pub nu_bar: f64,
    pub rho_bar: f64,
    pub p_bar: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct NecessityReport {
    pub dg: usize,
    pub line: usize,
    pub min_eig: f64,
    pub pd: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalReport {
    pub method: LocalMethod,
    pub note: String,
    pub dgs: Vec<DgReport>,
    pub lines: Vec<LineReport>,
    pub necessity: Vec<NecessityReport>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GlobalReport {
    pub mode: GraphMode,
    pub gamma: f64,
    pub gamma_tilde: f64,
    pub objective: f64,
    pub slack_trace: f64,
    pub eta_used: f64,
    pub approximate: bool,
    pub p: Vec<f64>,
    pub p_bar: Vec<f64>,
    /// `k_ij` with `u_G,i = Σ_j k_ij (I_ti/I_n,i - I_tj/I_n,j)`.
    pub consensus_gains: Vec<Vec<f64>>,
    pub links: Vec<Link>,
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DesignReport {
    pub provenance: Vec<String>,
    pub microgrid: Option<MicrogridSpec>,
    pub params: Option<DesignParams>,
    pub setpoint: Option<SharingSetpoint>,
    pub local: Option<LocalReport>,
    pub global: Option<GlobalReport>,
    pub error: Option<String>,
}

fn local_report(mg: &MicrogridSpec, local: &LocalDesign, params: &DesignParams) -> Result<LocalReport, DcmgError> {
    let necessity = local_necessary_verdicts(mg, local, params)?
        .into_iter()
        .map(|v| NecessityReport { dg: v.dg, line: v.line, min_eig: v.min_eig, pd: v.pd })
        .collect();
    Ok(LocalReport {
        method: local.method.clone(),
        note: local.note.clone(),
        dgs: local
            .dgs
            .iter()
            .map(|d| DgReport {
                gain: [d.gain[(0, 0)], d.gain[(0, 1)], d.gain[(0, 2)]],
                nu: d.nu,
                rho: d.rho(),
                rho_tilde: d.rho_tilde,
                gamma_tilde: d.gamma_tilde,
            })
            .collect(),
        lines: local.lines.iter().map(|l| LineReport { nu_bar: l.nu_bar, rho_bar: l.rho_bar, p_bar: l.p_bar }).collect(),
        necessity,
    })
}

fn global_report(r: &CodesignResult) -> GlobalReport {
    let n = r.p.len();
    GlobalReport {
        mode: r.mode,
        gamma: r.gamma,
        gamma_tilde: r.gamma_tilde,
        objective: r.objective,
        slack_trace: r.slack_trace,
        eta_used: r.eta_used,
        approximate: r.approximate,
        p: r.p.clone(),
        p_bar: r.p_bar.clone(),
        consensus_gains: (0..n).map(|i| (0..n).map(|j| r.comm.k[(i, j)]).collect()).collect(),
        links: r.comm.links.clone(),
        diagnostics: r.diagnostics.clone(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Status {
    Pass,
    Fail,
    Skip,
    Info,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub status: Status,
    pub detail: String,
}

impl Check {
    fn new(name: impl Into<String>, ok: bool, detail: impl Into<String>) -> Self {
        Check { name: name.into(), status: if ok { Status::Pass } else { Status::Fail }, detail: detail.into() }
    }

    fn with(name: impl Into<String>, status: Status, detail: impl Into<String>) -> Self {
        Check { name: name.into(), status, detail: detail.into() }
    }
}

pub struct ScenarioRun {
    pub scenario: Scenario,
    pub windows: MetricWindows,
    pub metrics: Metrics,
    /// Layers active at each event, in event order.
    pub layers_at_events: Vec<Layers>,
    pub dissipation: Option<DissipationReport>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct DroopComparison {
    pub proposed: f64,
    pub droop: f64,
}

pub struct Outcome {
    pub network: Network,
    pub report: DesignReport,
    pub runs: Vec<ScenarioRun>,
    pub droop: Option<DroopComparison>,
    pub checks: Vec<Check>,
}

impl Outcome {
    pub fn failures(&self) -> usize {
        self.checks.iter().filter(|c| c.status == Status::Fail).count()
    }
}

fn is_load_event(e: &Event) -> bool {
    matches!(e, Event::SetLoadCurrent { .. } | Event::AddLoadCurrent { .. } | Event::ScaleLoadConductance { .. })
}

/// Settling from every event; steady-state statistics over the last
/// `min(1 s, 20 %)` of the horizon; L2 ratio over the whole run when noise is on.
pub fn windows_for(s: &Scenario, band_center: f64) -> MetricWindows {
    MetricWindows {
        events: s.events.iter().map(|e| e.t).collect(),
        steady: (s.t_end - (0.2 * s.t_end).min(1.0), s.t_end),
        disturbed: s.disturbance.enabled.then_some((0.0, s.t_end)),
        band_center,
        band_rel: 0.01,
    }
}

/// Runs the droop baseline and the proposed controller from the proposed
/// equilibrium for 2 s and returns the largest average-voltage deviations
/// over the first second, before the droop secondary starts.
pub fn droop_comparison(
    mg: &MicrogridSpec,
    proposed: &ProposedController,
) -> Result<(DroopComparison, Trajectory), DcmgError> {
    let sc = Scenario::at_equilibrium("droop", 2.0);
    let droop = droop_baseline(mg, &proposed.v_r, DroopParams::defaults(mg, &proposed.v_r))?;
    let dt = simulate(mg, &Controller::Droop(droop), &sc)?;
    let pt = simulate(mg, &Controller::Proposed(proposed.clone()), &sc)?;
    let c = DroopComparison {
        proposed: max_average_deviation(&pt, 0.0, 1.0, mg.v_base),
        droop: max_average_deviation(&dt, 0.0, 1.0, mg.v_base),
    };
    Ok((c, dt))
}

fn write_json(dir: &Path, report: &DesignReport) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(report).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(dir.join("design.json"), text + "\n").map_err(io_err)
}

fn io_err(e: std::io::Error) -> CliError {
    CliError::Io(e.to_string())
}

fn commented(prov: &[String]) -> String {
    prov.iter().map(|l| format!("# {l}\n")).collect()
}

fn scenario_header(prov: &[String], s: &Scenario) -> Vec<String> {
    let mut h = prov.to_vec();
    h.push(format!(
        "scenario {}: t_end={} h={} noise={} variance={} noise_seed={}",
        s.name,
        s.t_end,
        s.h,
        s.disturbance.enabled,
        s.disturbance.variance.map_or("per-component".to_string(), |v| v.to_string()),
        s.disturbance.noise_seed
    ));
    h
}

fn write_traj(dir: &Path, name: &str, header: &[String], traj: &Trajectory, stride: usize) -> Result<(), CliError> {
    let f = File::create(dir.join(format!("traj_{name}.csv"))).map_err(io_err)?;
    traj.write_csv(BufWriter::new(f), header, stride).map_err(io_err)
}

fn write_metrics(dir: &Path, prov: &[String], runs: &[ScenarioRun], droop: Option<DroopComparison>) -> Result<(), CliError> {
    let mut f = BufWriter::new(File::create(dir.join("metrics.csv")).map_err(io_err)?);
    f.write_all(commented(prov).as_bytes()).map_err(io_err)?;
    let mut w = csv::Writer::from_writer(f);
    let csv_err = |e: csv::Error| CliError::Io(e.to_string());
    w.write_record(["scenario", "metric", "index", "value"]).map_err(csv_err)?;
    let mut row = |s: &str, m: &str, i: Option<usize>, v: Option<f64>| {
        w.write_record([
            s.to_string(),
            m.to_string(),
            i.map_or(String::new(), |i| i.to_string()),
            v.map_or(String::new(), |v| v.to_string()),
        ])
    };
    for r in runs {
        let s = r.scenario.name.as_str();
        let m = &r.metrics;
        for (i, e) in m.voltage_error.iter().enumerate() {
            row(s, "voltage_error", Some(i), Some(*e)).map_err(csv_err)?;
        }
        row(s, "voltage_band", None, Some(m.voltage_band)).map_err(csv_err)?;
        for (i, t) in m.settling.iter().enumerate() {
            row(s, "settling", Some(i), *t).map_err(csv_err)?;
        }
        row(s, "current_spread", None, Some(m.current_spread)).map_err(csv_err)?;
        row(s, "sharing_ratio", None, Some(m.sharing_ratio)).map_err(csv_err)?;
        row(s, "l2_ratio", None, m.l2_ratio).map_err(csv_err)?;
        row(s, "max_avg_deviation", None, Some(m.max_avg_deviation)).map_err(csv_err)?;
        if let Some(d) = &r.dissipation {
            for (i, v) in d.dg.iter().enumerate() {
                row(s, "dissipation_violation_dg", Some(i), Some(*v)).map_err(csv_err)?;
            }
            for (l, v) in d.line.iter().enumerate() {
                row(s, "dissipation_violation_line", Some(l), Some(*v)).map_err(csv_err)?;
            }
        }
    }
    if let Some(c) = droop {
        row("droop", "max_avg_deviation_proposed", None, Some(c.proposed)).map_err(csv_err)?;
        row("droop", "max_avg_deviation_droop", None, Some(c.droop)).map_err(csv_err)?;
    }
    w.flush().map_err(io_err)
}

fn write_verify(dir: &Path, prov: &[String], checks: &[Check]) -> Result<(), CliError> {
    let mut text = commented(prov);
    for c in checks {
        let tag = match c.status {
            Status::Pass => "PASS",
            Status::Fail => "FAIL",
            Status::Skip => "SKIP",
            Status::Info => "INFO",
        };
        text.push_str(&format!("{tag} {}: {}\n", c.name, c.detail));
    }
    let fails = checks.iter().filter(|c| c.status == Status::Fail).count();
    text.push_str(&format!("{} checks, {fails} failed\n", checks.len()));
    std::fs::write(dir.join("verify.txt"), text).map_err(io_err)
}

/// Acceptance checks over a finished run.
pub fn verify(
    mg: &MicrogridSpec,
    sp: &SharingSetpoint,
    local: &LocalDesign,
    local_rep: &LocalReport,
    global: &CodesignResult,
    runs: &[ScenarioRun],
    droop: Option<DroopComparison>,
) -> Result<Vec<Check>, DcmgError> {
    let mut out = Vec::new();
    let res = sharing_residual(mg, sp);
    out.push(Check::new("setpoint balance", res <= 1e-6, format!("relative residual {res:.3e}")));
    let eq = compute_equilibrium(mg, &sp.v_r())?;
    let x = equilibrium_state(&eq);
    let w = vec![0.0; 2 * mg.n() + mg.n_lines()];
    let drift = plant_rhs(mg, &Loads::nominal(mg), &x, eq.u_e.as_slice(), &w).iter().fold(0.0f64, |a, d| a.max(d.abs()));
    out.push(Check::new("equilibrium", drift <= 1e-6, format!("max |dx/dt| at the equilibrium {drift:.3e}")));

    let pd = local_rep.necessity.iter().filter(|v| v.pd).count();
    let total = local_rep.necessity.len();
    let detail = format!("{pd}/{total} necessary-condition matrices positive definite");
    out.push(match local.method {
        LocalMethod::Joint => Check::new("necessity chain", pd == total, detail),
        LocalMethod::Decoupled => Check::with("necessity chain", Status::Skip, format!("{detail}; not imposed by the decoupled design")),
    });
    out.push(Check::with(
        "global design",
        Status::Info,
        format!(
            "gamma {:.4}, {} links, {}",
            global.gamma,
            global.comm.links.len(),
            if global.approximate {
                format!("approximate (slack trace {:.3e} at eta {:.1e})", global.slack_trace, global.eta_used)
            } else {
                "exact".to_string()
            }
        ),
    ));

    for r in runs {
        let s = &r.scenario;
        let m = &r.metrics;
        for (k, e) in s.events.iter().enumerate() {
            if !is_load_event(&e.event) {
                continue;
            }
            let name = format!("{} settling after event {k} (t = {})", s.name, e.t);
            if r.layers_at_events[k] != Layers::ALL {
                out.push(Check::with(name, Status::Skip, "not all layers active"));
                continue;
            }
            let ok = m.settling[k].is_some_and(|t| t <= 0.5);
            out.push(Check::new(name, ok, format!("{:?} s (limit 0.5 s, band 1 %)", m.settling[k])));
        }
        let loads_nominal = !s.events.iter().any(|e| is_load_event(&e.event));
        let distributed_at_end = s.layers.distributed
            || s.events.iter().any(|e| matches!(e.event, Event::ActivateDistributed));
        if loads_nominal && !s.disturbance.enabled && distributed_at_end {
            out.push(Check::new(
                format!("{} current spread", s.name),
                m.current_spread <= 0.02,
                format!("{:.3e} (limit 0.02)", m.current_spread),
            ));
            let gap = (m.sharing_ratio - sp.i_s_star).abs();
            out.push(Check::new(
                format!("{} sharing ratio", s.name),
                gap <= 0.02,
                format!("{:.5} vs optimizer {:.5}", m.sharing_ratio, sp.i_s_star),
            ));
        }
        if s.disturbance.enabled {
            out.push(Check::new(
                format!("{} voltage band", s.name),
                m.voltage_band <= 1.0,
                format!("{:.4} V around {} V (limit 1 V)", m.voltage_band, mg.v_base),
            ));
            match m.l2_ratio {
                Some(l2) => out.push(Check::new(
                    format!("{} L2 ratio", s.name),
                    l2 <= 1.1 * global.gamma,
                    format!("{l2:.4} vs gamma {:.4} (+10 %)", global.gamma),
                )),
                None => out.push(Check::with(format!("{} L2 ratio", s.name), Status::Skip, "no disturbance energy")),
            }
        }
        if let Some(d) = &r.dissipation {
            let worst = d.worst();
            out.push(Check::new(
                format!("{} dissipation", s.name),
                worst <= 0.01,
                format!("worst violating fraction {:.4} % over {} samples", 100.0 * worst, d.samples),
            ));
        }
    }
    if let Some(c) = droop {
        out.push(Check::new(
            "droop comparison",
            c.proposed < c.droop,
            format!("max average deviation over [0, 1] s: proposed {:.4} V, droop {:.4} V", c.proposed, c.droop),
        ));
    }
    Ok(out)
}

/// Executes the pipeline up to `upto`, writing artifacts into `cfg.out_dir`.
/// On a stage failure the partial report is still written.
pub fn run_pipeline(cfg: &RunConfig, upto: Stage, log: &mut dyn FnMut(&str)) -> Result<Outcome, CliError> {
    let dir = cfg.out_dir.clone();
    std::fs::create_dir_all(&dir).map_err(io_err)?;
    let network = build_network(cfg)?;
    let mg = &network.mg;
    let prov = network.provenance.clone();
    let mut report = DesignReport { provenance: prov.clone(), microgrid: Some(mg.clone()), ..Default::default() };
    let scenarios = cfg.scenarios()?;
    for s in &scenarios {
        s.validate(mg.n()).map_err(|e| CliError::Config(format!("scenario {}: {e}", s.name)))?;
    }
    let params = cfg.design_params(mg, network.distances.as_ref())?;
    report.params = Some(params.clone());

    macro_rules! attempt {
        ($stage:expr, $e:expr) => {
            match $e {
                Ok(v) => v,
                Err(source) => {
                    let err = CliError::Stage { stage: $stage, source };
                    report.error = Some(err.to_string());
                    write_json(&dir, &report)?;
                    return Err(err);
                }
            }
        };
    }
    let settings = LmiSettings::default();

    let t = Instant::now();
    let sp = attempt!("setpoint", optimize_reference(mg, &cfg.setpoint_options(mg.n()), &SolveOptions::default()));
    log(&format!("setpoint: I_s* = {:.5} ({:.2} s)", sp.i_s_star, t.elapsed().as_secs_f64()));
    report.setpoint = Some(sp.clone());
    if upto == Stage::Setpoint {
        write_json(&dir, &report)?;
        return Ok(Outcome { network, report, runs: vec![], droop: None, checks: vec![] });
    }

    let t = Instant::now();
    let local = attempt!("local design", local_stage(mg, &params, cfg.local_choice(), &settings));
    let local_rep = attempt!("local design", local_report(mg, &local, &params));
    log(&format!("local design: {:?} ({:.2} s)", local.method, t.elapsed().as_secs_f64()));
    report.local = Some(local_rep.clone());
    write_json(&dir, &report)?;
    if upto == Stage::DesignLocal {
        return Ok(Outcome { network, report, runs: vec![], droop: None, checks: vec![] });
    }

    let t = Instant::now();
    let global = attempt!("global design", design_global(mg, &local, &params, &settings, cfg.escalate()));
    log(&format!(
        "global design: gamma = {:.4}, {} links, eta = {:.1e} ({:.2} s)",
        global.gamma,
        global.comm.links.len(),
        global.eta_used,
        t.elapsed().as_secs_f64()
    ));
    report.global = Some(global_report(&global));
    write_json(&dir, &report)?;
    if upto == Stage::DesignGlobal {
        return Ok(Outcome { network, report, runs: vec![], droop: None, checks: vec![] });
    }

    let ctrl = attempt!("simulation", ProposedController::new(mg, &sp, &local, Some(&global.k)));
    let eq = attempt!("simulation", compute_equilibrium(mg, &sp.v_r()));
    let certs = Certificates::from_local(&local);
    let mut runs = Vec::new();
    for s in scenarios {
        let t = Instant::now();
        let traj = attempt!("simulation", simulate(mg, &Controller::Proposed(ctrl.clone()), &s));
        write_traj(&dir, &s.name, &scenario_header(&prov, &s), &traj, cfg.flags.csv_stride)?;
        let windows = windows_for(&s, mg.v_base);
        let metrics = attempt!("simulation", compute_metrics(mg, &traj, &sp, &windows));
        let dissipation = if s.disturbance.enabled {
            None
        } else {
            Some(attempt!("simulation", dissipation_check(mg, &traj, &eq, &certs)))
        };
        let layers_at_events = s.events.iter().map(|e| traj.layers[traj.index_at(e.t)]).collect();
        log(&format!("scenario {}: {} steps ({:.2} s)", s.name, traj.len(), t.elapsed().as_secs_f64()));
        runs.push(ScenarioRun { scenario: s, windows, metrics, layers_at_events, dissipation });
    }
    let droop = if cfg.flags.droop_baseline {
        let (c, dt) = attempt!("simulation", droop_comparison(mg, &ctrl));
        write_traj(&dir, "droop", &scenario_header(&prov, &Scenario::at_equilibrium("droop", 2.0)), &dt, cfg.flags.csv_stride)?;
        Some(c)
    } else {
        None
    };
    write_metrics(&dir, &prov, &runs, droop)?;

    let mut checks = Vec::new();
    if upto == Stage::Verify {
        checks = attempt!("verification", verify(mg, &sp, &local, &local_rep, &global, &runs, droop));
        write_verify(&dir, &prov, &checks)?;
    }
    Ok(Outcome { network, report, runs, droop, checks })
}
