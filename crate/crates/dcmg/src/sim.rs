//! Fixed-step RK4 simulation of the closed-loop microgrid, a droop baseline,
//! metric extraction and trajectory-level dissipation checks.
//!
//! States are stored per DG as `[V, I_t, v]` followed by the line currents.
//! For the droop baseline the `v` slot holds the secondary integrator.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codesign::LocalDesign;
use crate::dissipativity::SupplyRate;
use crate::equilibrium::{compute_equilibrium, EquilibriumPoint, SharingSetpoint};
use crate::model::{current_gains, dg_state_matrices, MicrogridSpec};
use crate::DcmgError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Event {
    ActivateSteady,
    ActivateLocal,
    ActivateDistributed,
    /// `dg = None` applies to every DG.
    SetLoadCurrent { dg: Option<usize>, value: f64 },
    AddLoadCurrent { dg: Option<usize>, delta: f64 },
    ScaleLoadConductance { dg: Option<usize>, factor: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub t: f64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layers {
    pub steady: bool,
    pub local: bool,
    pub distributed: bool,
}

impl Layers {
    pub const ALL: Layers = Layers { steady: true, local: true, distributed: true };
    pub const NONE: Layers = Layers { steady: false, local: false, distributed: false };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisturbanceConfig {
    pub enabled: bool,
    /// Overrides every per-component variance when set.
    pub variance: Option<f64>,
    pub noise_seed: u64,
}

impl Default for DisturbanceConfig {
    fn default() -> Self {
        DisturbanceConfig { enabled: false, variance: None, noise_seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitialState {
    /// The equilibrium at the setpoint references.
    Equilibrium,
    /// All states zero.
    Origin,
    /// Full state vector in storage order.
    State(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub t_end: f64,
    pub h: f64,
    pub initial: InitialState,
    pub layers: Layers,
    pub events: Vec<TimedEvent>,
    pub disturbance: DisturbanceConfig,
}

impl Scenario {
    /// All layers on from the equilibrium, no events.
    pub fn at_equilibrium(name: &str, t_end: f64) -> Self {
        Scenario {
            name: name.into(),
            t_end,
            h: 1e-4,
            initial: InitialState::Equilibrium,
            layers: Layers::ALL,
            events: Vec::new(),
            disturbance: DisturbanceConfig::default(),
        }
    }

    /// Layers switched on one by one (steady 1 s, local 3 s, distributed
    /// 6 s) starting from rest.
    pub fn layer_activation(t_end: f64) -> Self {
        let ev = |t, event| TimedEvent { t, event };
        Scenario {
            name: "layers".into(),
            t_end,
            h: 1e-4,
            initial: InitialState::Origin,
            layers: Layers::NONE,
            events: vec![
                ev(1.0, Event::ActivateSteady),
                ev(3.0, Event::ActivateLocal),
                ev(6.0, Event::ActivateDistributed),
            ],
            disturbance: DisturbanceConfig::default(),
        }
    }

    /// Load changes from the equilibrium: +3 A on every constant-current load
    /// at 2 s, conductive loads ×1.5 at 4 s and back at 8 s.
    pub fn load_changes(t_end: f64) -> Self {
        let ev = |t, event| TimedEvent { t, event };
        Scenario {
            name: "loads".into(),
            t_end,
            h: 1e-4,
            initial: InitialState::Equilibrium,
            layers: Layers::ALL,
            events: vec![
                ev(2.0, Event::AddLoadCurrent { dg: None, delta: 3.0 }),
                ev(4.0, Event::ScaleLoadConductance { dg: None, factor: 1.5 }),
                ev(8.0, Event::ScaleLoadConductance { dg: None, factor: 1.0 / 1.5 }),
            ],
            disturbance: DisturbanceConfig::default(),
        }
    }

    pub fn validate(&self, n: usize) -> Result<(), DcmgError> {
        if !(self.h > 0.0 && self.t_end > 0.0 && self.h.is_finite() && self.t_end.is_finite()) {
            return Err(DcmgError::Invalid("need h > 0 and t_end > 0".into()));
        }
        let mut last = 0.0;
        for e in &self.events {
            if !(e.t >= last && e.t <= self.t_end) {
                return Err(DcmgError::Invalid(format!("event at t = {} is out of order or range", e.t)));
            }
            last = e.t;
            let dg = match &e.event {
                Event::SetLoadCurrent { dg, .. } | Event::AddLoadCurrent { dg, .. } => *dg,
                Event::ScaleLoadConductance { dg, factor } => {
                    if !(*factor >= 0.0) {
                        return Err(DcmgError::Invalid("load conductance factor must be nonnegative".into()));
                    }
                    *dg
                }
                _ => None,
            };
            if dg.is_some_and(|i| i >= n) {
                return Err(DcmgError::Invalid(format!("event targets DG {} of {n}", dg.unwrap_or(0))));
            }
        }
        if let Some(v) = self.disturbance.variance {
            if !(v >= 0.0) {
                return Err(DcmgError::Invalid("disturbance variance must be nonnegative".into()));
            }
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.h - 1e-9).ceil() as usize
    }
}

/// The proposed three-layer controller.
#[derive(Debug, Clone)]
pub struct ProposedController {
    pub v_r: DVector<f64>,
    pub u_s: DVector<f64>,
    pub i_te: DVector<f64>,
    /// Local gains on `[V - V_r, I_t - I_tE, v]`.
    pub gains: Vec<[f64; 3]>,
    /// Consensus gains `k_ij`; `u_G,i = Σ_j k_ij (I_ti/I_n,i - I_tj/I_n,j)`.
    pub k: DMatrix<f64>,
    pub i_n: DVector<f64>,
}

impl ProposedController {
    /// `global_k` is the 3N x 3N interconnection gain; `None` disables the
    /// distributed layer's effect.
    pub fn new(
        mg: &MicrogridSpec,
        setpoint: &SharingSetpoint,
        local: &LocalDesign,
        global_k: Option<&DMatrix<f64>>,
    ) -> Result<Self, DcmgError> {
        let n = mg.n();
        if local.dgs.len() != n || setpoint.v_r_star.len() != n {
            return Err(DcmgError::Invalid("controller dimensions do not match the network".into()));
        }
        let eq = compute_equilibrium(mg, &setpoint.v_r())?;
        let i_n = mg.rated_currents();
        let k = match global_k {
            None => DMatrix::zeros(n, n),
            Some(kb) => {
                if kb.nrows() != 3 * n || kb.ncols() != 3 * n {
                    return Err(DcmgError::Invalid("global gain must be 3N x 3N".into()));
                }
                let ki = current_gains(kb);
                DMatrix::from_fn(n, n, |i, j| if i == j { 0.0 } else { -i_n[j] * mg.dgs[i].l_t * ki[(i, j)] })
            }
        };
        let gains = local
            .dgs
            .iter()
            .map(|d| {
                if d.gain.nrows() != 1 || d.gain.ncols() != 3 {
                    return Err(DcmgError::Invalid("local gains must be 1 x 3".into()));
                }
                Ok([d.gain[(0, 0)], d.gain[(0, 1)], d.gain[(0, 2)]])
            })
            .collect::<Result<_, _>>()?;
        Ok(ProposedController { v_r: setpoint.v_r(), u_s: setpoint.u_s(), i_te: eq.i_te, gains, k, i_n })
    }

    /// Distributed input at the given terminal currents.
    pub fn distributed_input(&self, i_t: &[f64]) -> Vec<f64> {
        let n = self.i_n.len();
        (0..n)
            .map(|i| {
                let ri = i_t[i] / self.i_n[i];
                (0..n).map(|j| self.k[(i, j)] * (ri - i_t[j] / self.i_n[j])).sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroopParams {
    /// Per-DG droop coefficients (Ω).
    pub m: Vec<f64>,
    pub secondary_on_at: f64,
    pub ki_sec: f64,
}

impl DroopParams {
    /// 5 % droop (`m_i = 0.05 V_r / I_n,i`), secondary at 1 s with 20 1/s.
    pub fn defaults(mg: &MicrogridSpec, v_r: &DVector<f64>) -> Self {
        let i_n = mg.rated_currents();
        DroopParams { m: (0..mg.n()).map(|i| 0.05 * v_r[i] / i_n[i]).collect(), secondary_on_at: 1.0, ki_sec: 20.0 }
    }
}

/// Droop primary `u_i = V_r,i - m_i I_ti + φ_i` with a secondary integrator
/// `φ̇_i = k (mean V_r - mean V)` (ideal average consensus).
#[derive(Debug, Clone)]
pub struct DroopController {
    pub v_r: DVector<f64>,
    pub params: DroopParams,
}

pub fn droop_baseline(mg: &MicrogridSpec, v_r: &DVector<f64>, params: DroopParams) -> Result<DroopController, DcmgError> {
    if params.m.len() != mg.n() || v_r.len() != mg.n() {
        return Err(DcmgError::Invalid("droop coefficients must have one entry per DG".into()));
    }
    if params.m.iter().any(|m| !(*m >= 0.0)) || !(params.ki_sec >= 0.0) {
        return Err(DcmgError::Invalid("droop coefficients and the secondary gain must be nonnegative".into()));
    }
    Ok(DroopController { v_r: v_r.clone(), params })
}

#[derive(Debug, Clone)]
pub enum Controller {
    Proposed(ProposedController),
    Droop(DroopController),
}

/// Load state that events can change.
#[derive(Debug, Clone, PartialEq)]
pub struct Loads {
    pub i_l: Vec<f64>,
    pub y_l: Vec<f64>,
}

impl Loads {
    pub fn nominal(mg: &MicrogridSpec) -> Self {
        Loads { i_l: mg.dgs.iter().map(|d| d.i_l_bar).collect(), y_l: mg.dgs.iter().map(|d| d.y_l).collect() }
    }
}

/// Plant derivative for states `x`, DG inputs `u` and disturbances
/// `w = [w_v (N), w_c (N), w_l (L)]`. The integrator slots get zero.
pub fn plant_rhs(mg: &MicrogridSpec, loads: &Loads, x: &[f64], u: &[f64], w: &[f64]) -> Vec<f64> {
    let (n, nl) = (mg.n(), mg.n_lines());
    let mut dx = vec![0.0; 3 * n + nl];
    let mut out_cur = vec![0.0; n];
    for (l, line) in mg.lines.iter().enumerate() {
        let il = x[3 * n + l];
        out_cur[line.tail] += il;
        out_cur[line.head] -= il;
        let dv = x[3 * line.tail] - x[3 * line.head];
        dx[3 * n + l] = (-line.r_l * il + dv + w[2 * n + l]) / line.l_l;
    }
    for (i, dg) in mg.dgs.iter().enumerate() {
        let (v, it) = (x[3 * i], x[3 * i + 1]);
        dx[3 * i] = (it - loads.y_l[i] * v - loads.i_l[i] - out_cur[i] + w[i]) / dg.c_t;
        dx[3 * i + 1] = (-v - dg.r_t * it + u[i] + w[n + i]) / dg.l_t;
    }
    dx
}

struct Stage<'a> {
    mg: &'a MicrogridSpec,
    ctrl: &'a Controller,
    loads: &'a Loads,
    layers: Layers,
    secondary: bool,
}

impl Stage<'_> {
    fn control(&self, x: &[f64]) -> Vec<f64> {
        let n = self.mg.n();
        match self.ctrl {
            Controller::Proposed(c) => {
                let i_t: Vec<f64> = (0..n).map(|i| x[3 * i + 1]).collect();
                let ug = if self.layers.distributed { c.distributed_input(&i_t) } else { vec![0.0; n] };
                (0..n)
                    .map(|i| {
                        let mut u = 0.0;
                        if self.layers.steady {
                            u += c.u_s[i];
                        }
                        if self.layers.local {
                            let g = &c.gains[i];
                            u += g[0] * (x[3 * i] - c.v_r[i]) + g[1] * (x[3 * i + 1] - c.i_te[i]) + g[2] * x[3 * i + 2];
                        }
                        u + ug[i]
                    })
                    .collect()
            }
            Controller::Droop(d) => {
                (0..n).map(|i| d.v_r[i] - d.params.m[i] * x[3 * i + 1] + x[3 * i + 2]).collect()
            }
        }
    }

    fn rhs(&self, x: &[f64], w: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.mg.n();
        let u = self.control(x);
        let mut dx = plant_rhs(self.mg, self.loads, x, &u, w);
        match self.ctrl {
            Controller::Proposed(c) => {
                if self.layers.local {
                    for i in 0..n {
                        dx[3 * i + 2] = x[3 * i] - c.v_r[i];
                    }
                }
            }
            Controller::Droop(d) => {
                if self.secondary {
                    let err = (d.v_r.sum() - (0..n).map(|i| x[3 * i]).sum::<f64>()) / n as f64;
                    for i in 0..n {
                        dx[3 * i + 2] = d.params.ki_sec * err;
                    }
                }
            }
        }
        (dx, u)
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub n_dgs: usize,
    pub n_lines: usize,
    pub t: Vec<f64>,
    /// Full state per sample.
    pub x: Vec<Vec<f64>>,
    /// DG inputs at each sample.
    pub u: Vec<Vec<f64>>,
    /// Disturbances held over `[t_k, t_k+1)`; zero at the last sample.
    pub w: Vec<Vec<f64>>,
    pub layers: Vec<Layers>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn voltage(&self, k: usize, i: usize) -> f64 {
        self.x[k][3 * i]
    }

    pub fn current(&self, k: usize, i: usize) -> f64 {
        self.x[k][3 * i + 1]
    }

    pub fn integrator(&self, k: usize, i: usize) -> f64 {
        self.x[k][3 * i + 2]
    }

    pub fn line_current(&self, k: usize, l: usize) -> f64 {
        self.x[k][3 * self.n_dgs + l]
    }

    /// Index of the first sample at or after `t`.
    pub fn index_at(&self, t: f64) -> usize {
        self.t.partition_point(|&s| s < t - 1e-12)
    }

    /// CSV with columns `t, V_*, It_*, v_*, I_line_*, u_*`, every `stride`-th
    /// sample plus the last one.
    pub fn write_csv<W: std::io::Write>(&self, out: W, header_lines: &[String], stride: usize) -> Result<(), std::io::Error> {
        let stride = stride.max(1);
        use std::io::Write;
        let mut out = std::io::BufWriter::new(out);
        for h in header_lines {
            writeln!(out, "# {h}")?;
        }
        let (n, nl) = (self.n_dgs, self.n_lines);
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=n).map(|i| format!("V_{i}")));
        cols.extend((1..=n).map(|i| format!("It_{i}")));
        cols.extend((1..=n).map(|i| format!("v_{i}")));
        cols.extend((1..=nl).map(|l| format!("I_line_{l}")));
        cols.extend((1..=n).map(|i| format!("u_{i}")));
        writeln!(out, "{}", cols.join(","))?;
        let last = self.len().saturating_sub(1);
        for k in (0..self.len()).filter(|k| k % stride == 0 || *k == last) {
            let mut row = vec![self.t[k]];
            for slot in 0..3 {
                row.extend((0..n).map(|i| self.x[k][3 * i + slot]));
            }
            row.extend((0..nl).map(|l| self.x[k][3 * n + l]));
            row.extend(&self.u[k]);
            let s: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
            writeln!(out, "{}", s.join(","))?;
        }
        out.flush()
    }
}

fn initial_state(mg: &MicrogridSpec, v_r: &DVector<f64>, init: &InitialState) -> Result<Vec<f64>, DcmgError> {
    let (n, nl) = (mg.n(), mg.n_lines());
    match init {
        InitialState::Origin => Ok(vec![0.0; 3 * n + nl]),
        InitialState::Equilibrium => Ok(equilibrium_state(&compute_equilibrium(mg, v_r)?)),
        InitialState::State(x) => {
            if x.len() != 3 * n + nl || x.iter().any(|v| !v.is_finite()) {
                return Err(DcmgError::Invalid(format!("initial state must have {} finite entries", 3 * n + nl)));
            }
            Ok(x.clone())
        }
    }
}

/// Equilibrium in storage order.
pub fn equilibrium_state(eq: &EquilibriumPoint) -> Vec<f64> {
    let n = eq.v_e.len();
    let mut x = Vec::with_capacity(3 * n + eq.i_bar_e.len());
    for i in 0..n {
        x.extend([eq.v_e[i], eq.i_te[i], eq.v_int[i]]);
    }
    x.extend(eq.i_bar_e.iter());
    x
}

fn apply(ev: &Event, layers: &mut Layers, loads: &mut Loads) {
    let pick = |dg: &Option<usize>, n: usize| -> Vec<usize> { dg.map_or_else(|| (0..n).collect(), |i| vec![i]) };
    let n = loads.i_l.len();
    match ev {
        Event::ActivateSteady => layers.steady = true,
        Event::ActivateLocal => layers.local = true,
        Event::ActivateDistributed => layers.distributed = true,
        Event::SetLoadCurrent { dg, value } => pick(dg, n).into_iter().for_each(|i| loads.i_l[i] = *value),
        Event::AddLoadCurrent { dg, delta } => pick(dg, n).into_iter().for_each(|i| loads.i_l[i] += *delta),
        Event::ScaleLoadConductance { dg, factor } => pick(dg, n).into_iter().for_each(|i| loads.y_l[i] *= *factor),
    }
}

/// Integrates the closed loop. The reference `v_r` is used for the initial
/// equilibrium (and is the controller's own reference for both kinds).
pub fn simulate(mg: &MicrogridSpec, ctrl: &Controller, scenario: &Scenario) -> Result<Trajectory, DcmgError> {
    mg.validate()?;
    scenario.validate(mg.n())?;
    let (n, nl) = (mg.n(), mg.n_lines());
    let v_r = match ctrl {
        Controller::Proposed(c) => &c.v_r,
        Controller::Droop(d) => &d.v_r,
    };
    if v_r.len() != n {
        return Err(DcmgError::Invalid("controller reference has the wrong length".into()));
    }
    let mut x = initial_state(mg, v_r, &scenario.initial)?;
    let steps = scenario.steps();
    let h = scenario.h;
    let mut loads = Loads::nominal(mg);
    let mut layers = scenario.layers;
    let mut next_event = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.disturbance.noise_seed);
    let sigma: Vec<f64> = {
        let d = &scenario.disturbance;
        let var = |own: f64| d.variance.unwrap_or(own).sqrt();
        let mut s: Vec<f64> = mg.dgs.iter().map(|g| var(g.sigma_v2)).collect();
        s.extend(mg.dgs.iter().map(|g| var(g.sigma_c2)));
        s.extend(mg.lines.iter().map(|l| var(l.sigma_l2)));
        s
    };
    let nw = 2 * n + nl;

    let mut traj = Trajectory {
        n_dgs: n,
        n_lines: nl,
        t: Vec::with_capacity(steps + 1),
        x: Vec::with_capacity(steps + 1),
        u: Vec::with_capacity(steps + 1),
        w: Vec::with_capacity(steps + 1),
        layers: Vec::with_capacity(steps + 1),
    };
    let axpy = |x: &[f64], a: f64, d: &[f64]| -> Vec<f64> { x.iter().zip(d).map(|(x, d)| x + a * d).collect() };
    for k in 0..=steps {
        let t = k as f64 * h;
        while next_event < scenario.events.len() && scenario.events[next_event].t <= t + 0.5 * h {
            apply(&scenario.events[next_event].event, &mut layers, &mut loads);
            next_event += 1;
        }
        let secondary = matches!(ctrl, Controller::Droop(d) if t >= d.params.secondary_on_at - 0.5 * h);
        let stage = Stage { mg, ctrl, loads: &loads, layers, secondary };
        let w: Vec<f64> = if scenario.disturbance.enabled && k < steps {
            sigma.iter().map(|s| {
                let z: f64 = StandardNormal.sample(&mut rng);
                s * z
            }).collect()
        } else {
            vec![0.0; nw]
        };
        let (k1, u) = stage.rhs(&x, &w);
        traj.t.push(t);
        traj.x.push(x.clone());
        traj.u.push(u);
        traj.w.push(w.clone());
        traj.layers.push(layers);
        if k == steps {
            break;
        }
        let (k2, _) = stage.rhs(&axpy(&x, 0.5 * h, &k1), &w);
        let (k3, _) = stage.rhs(&axpy(&x, 0.5 * h, &k2), &w);
        let (k4, _) = stage.rhs(&axpy(&x, h, &k3), &w);
        for j in 0..x.len() {
            x[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if let Some(j) = x.iter().position(|v| !v.is_finite() || v.abs() > 1e9) {
            return Err(DcmgError::Diverged { t: t + h, msg: format!("state {j} is {}", x[j]) });
        }
    }
    Ok(traj)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricWindows {
    /// Event times; settling is measured from each until the next one.
    pub events: Vec<f64>,
    /// Window for steady-state errors, spread and the voltage band.
    pub steady: (f64, f64),
    /// Window for the empirical L2 ratio.
    pub disturbed: Option<(f64, f64)>,
    /// Center and relative half-width of the settling band.
    pub band_center: f64,
    pub band_rel: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Mean `V_i - V_r,i` over the steady window.
    pub voltage_error: Vec<f64>,
    /// Largest `|V_i - band_center|` over the steady window.
    pub voltage_band: f64,
    /// Per event; `None` if the band is not re-entered for good.
    pub settling: Vec<Option<f64>>,
    pub current_spread: f64,
    pub sharing_ratio: f64,
    pub l2_ratio: Option<f64>,
    pub max_avg_deviation: f64,
}

/// Metrics against the setpoint. `z` for the L2 ratio is the stacked
/// deviation from the setpoint equilibrium, `w` the injected disturbances.
pub fn compute_metrics(
    mg: &MicrogridSpec,
    traj: &Trajectory,
    setpoint: &SharingSetpoint,
    win: &MetricWindows,
) -> Result<Metrics, DcmgError> {
    let (t0, t1) = (traj.t[0], *traj.t.last().expect("nonempty"));
    let inside = |a: f64, b: f64| a >= t0 - 1e-12 && b <= t1 + 1e-9 && a <= b;
    if !inside(win.steady.0, win.steady.1)
        || win.events.iter().any(|&e| !inside(e, e))
        || win.disturbed.is_some_and(|(a, b)| !inside(a, b))
    {
        return Err(DcmgError::Invalid("metric window lies outside the trajectory".into()));
    }
    let n = traj.n_dgs;
    let v_r = setpoint.v_r();
    let i_n = mg.rated_currents();
    let (s0, s1) = (traj.index_at(win.steady.0), traj.index_at(win.steady.1).min(traj.len() - 1));
    let cnt = (s1 - s0 + 1) as f64;
    let mut voltage_error = vec![0.0; n];
    let mut band: f64 = 0.0;
    let mut spread: f64 = 0.0;
    let mut ratio_sum = 0.0;
    let mut max_avg: f64 = 0.0;
    for k in s0..=s1 {
        let mut avg = 0.0;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for i in 0..n {
            let v = traj.voltage(k, i);
            voltage_error[i] += (v - v_r[i]) / cnt;
            band = band.max((v - win.band_center).abs());
            avg += v / n as f64;
            let r = traj.current(k, i) / i_n[i];
            lo = lo.min(r);
            hi = hi.max(r);
            ratio_sum += r / (n as f64 * cnt);
        }
        spread = spread.max(hi - lo);
        max_avg = max_avg.max((avg - win.band_center).abs());
    }

    let tol = win.band_rel * win.band_center.abs();
    let mut settling = Vec::new();
    for (e, &te) in win.events.iter().enumerate() {
        let end = win.events.get(e + 1).copied().unwrap_or(t1);
        let (a, b) = (traj.index_at(te), traj.index_at(end).min(traj.len() - 1));
        let last_out = (a..=b).rev().find(|&k| (0..n).any(|i| (traj.voltage(k, i) - win.band_center).abs() > tol));
        settling.push(match last_out {
            None => Some(0.0),
            Some(k) if k == b => None,
            Some(k) => Some(traj.t[k + 1] - te),
        });
    }

    let l2_ratio = match win.disturbed {
        None => None,
        Some((a, b)) => {
            let xe = equilibrium_state(&compute_equilibrium(mg, &v_r)?);
            let (ka, kb) = (traj.index_at(a), traj.index_at(b).min(traj.len() - 1));
            let (mut zz, mut ww) = (0.0, 0.0);
            for k in ka..kb {
                zz += traj.x[k].iter().zip(&xe).map(|(x, e)| (x - e).powi(2)).sum::<f64>();
                ww += traj.w[k].iter().map(|w| w * w).sum::<f64>();
            }
            (ww > 0.0).then(|| (zz / ww).sqrt())
        }
    };
    Ok(Metrics {
        voltage_error,
        voltage_band: band,
        settling,
        current_spread: spread,
        sharing_ratio: ratio_sum,
        l2_ratio,
        max_avg_deviation: max_avg,
    })
}

/// Largest `|mean_i V_i - center|` over `[a, b]`.
pub fn max_average_deviation(traj: &Trajectory, a: f64, b: f64, center: f64) -> f64 {
    let (ka, kb) = (traj.index_at(a), traj.index_at(b).min(traj.len() - 1));
    (ka..=kb)
        .map(|k| ((0..traj.n_dgs).map(|i| traj.voltage(k, i)).sum::<f64>() / traj.n_dgs as f64 - center).abs())
        .fold(0.0, f64::max)
}

/// Storage and supply for one subsystem, in deviation coordinates.
#[derive(Debug, Clone)]
pub struct DgCertificate {
    pub gain: DMatrix<f64>,
    pub storage: DMatrix<f64>,
    pub supply: SupplyRate,
}

#[derive(Debug, Clone)]
pub struct LineCertificate {
    pub storage: f64,
    pub supply: SupplyRate,
}

#[derive(Debug, Clone)]
pub struct Certificates {
    pub dg: Vec<DgCertificate>,
    pub line: Vec<LineCertificate>,
}

impl Certificates {
    pub fn from_local(local: &LocalDesign) -> Self {
        Certificates {
            dg: local
                .dgs
                .iter()
                .map(|d| DgCertificate {
                    gain: d.gain.clone(),
                    storage: d.storage(),
                    supply: SupplyRate::if_ofp(d.nu, d.rho(), 3),
                })
                .collect(),
            line: local
                .lines
                .iter()
                .map(|l| LineCertificate { storage: l.p_bar, supply: SupplyRate::if_ofp(l.nu_bar, l.rho_bar, 1) })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DissipationReport {
    pub dg: Vec<f64>,
    pub line: Vec<f64>,
    pub samples: usize,
}

impl DissipationReport {
    pub fn worst(&self) -> f64 {
        self.dg.iter().chain(&self.line).copied().fold(0.0, f64::max)
    }
}

/// Checks `d/dt S(x̃) ≤ s(u, y)` at every interior sample, with
/// `Ṡ = 2x̃ᵀP ẋ̃` and `ẋ̃` from central differences. DG subsystems are the locally closed loops
/// `ẋ̃ = (A + BK)x̃ + u, y = x̃`, so `u` is recovered as
/// `ẋ̃ - (A + BK)x̃`; lines take `u = Bᵀ Ṽ + w̄` and `y = Ĩ`. A sample
/// counts as violating beyond `1e-3 (|Ṡ| + s_abs) + 1e-6 |y|² + 1e-9`, where `s_abs`
/// is the supply evaluated with absolute values (so cancellation between
/// large terms does not shrink the tolerance).
pub fn dissipation_check(
    mg: &MicrogridSpec,
    traj: &Trajectory,
    reference: &EquilibriumPoint,
    certs: &Certificates,
) -> Result<DissipationReport, DcmgError> {
    let (n, nl) = (mg.n(), mg.n_lines());
    if certs.dg.len() != n || certs.line.len() != nl || traj.n_dgs != n || traj.n_lines != nl {
        return Err(DcmgError::Invalid("certificates do not match the network".into()));
    }
    let xe = equilibrium_state(reference);
    let dev = |k: usize| -> Vec<f64> { traj.x[k].iter().zip(&xe).map(|(x, e)| x - e).collect() };
    let acl: Vec<DMatrix<f64>> = mg
        .dgs
        .iter()
        .zip(&certs.dg)
        .map(|(d, c)| {
            let (a, b, _) = dg_state_matrices(d);
            a + b * &c.gain
        })
        .collect();
    let mut bad_dg = vec![0usize; n];
    let mut bad_line = vec![0usize; nl];
    let samples = traj.len().saturating_sub(2);
    let violates = |sdot: f64, x: &SupplyRate, u: &DVector<f64>, y: &DVector<f64>| {
        let s = x.eval(u, y);
        let (ua, ya) = (u.abs(), y.abs());
        let s_abs = (ua.transpose() * x.x11.abs() * &ua + ya.transpose() * x.x22.abs() * &ya)[(0, 0)]
            + 2.0 * (ua.transpose() * x.x12.abs() * &ya)[(0, 0)];
        sdot - s > 1e-3 * (sdot.abs() + s_abs) + 1e-6 * y.norm_squared() + 1e-9
    };
    for k in 1..traj.len().saturating_sub(1) {
        let (xm, x0, xp) = (dev(k - 1), dev(k), dev(k + 1));
        let dt = traj.t[k + 1] - traj.t[k - 1];
        for i in 0..n {
            let sl = |v: &[f64]| DVector::from_row_slice(&v[3 * i..3 * i + 3]);
            let (ym, y0, yp) = (sl(&xm), sl(&x0), sl(&xp));
            let st = &certs.dg[i].storage;
            let ydot = (&yp - &ym) / dt;
            let sdot = 2.0 * (y0.transpose() * st * &ydot)[(0, 0)];
            let u = ydot - &acl[i] * &y0;
            if violates(sdot, &certs.dg[i].supply, &u, &y0) {
                bad_dg[i] += 1;
            }
        }
        for (l, line) in mg.lines.iter().enumerate() {
            let j = 3 * n + l;
            let p = certs.line[l].storage;
            let sdot = 2.0 * p * x0[j] * (xp[j] - xm[j]) / dt;
            let u = x0[3 * line.tail] - x0[3 * line.head] + traj.w[k][2 * n + l];
            let (u, y) = (DVector::from_element(1, u), DVector::from_element(1, x0[j]));
            if violates(sdot, &certs.line[l].supply, &u, &y) {
                bad_line[l] += 1;
            }
        }
    }
    let frac = |b: usize| if samples == 0 { 0.0 } else { b as f64 / samples as f64 };
    Ok(DissipationReport {
        dg: bad_dg.into_iter().map(frac).collect(),
        line: bad_line.into_iter().map(frac).collect(),
        samples,
    })
}
