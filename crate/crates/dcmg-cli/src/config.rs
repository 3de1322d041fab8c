//! Run configuration (TOML) and its resolution into library types.

use std::path::{Path, PathBuf};

use dcmg::codesign::{DesignParams, GraphMode};
use dcmg::equilibrium::SetpointOptions;
use dcmg::model::MicrogridSpec;
use dcmg::sim::{DisturbanceConfig, InitialState, Layers, Scenario, TimedEvent};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub microgrid: MicrogridConfig,
    #[serde(default)]
    pub design: DesignConfig,
    #[serde(default)]
    pub setpoint: SetpointConfig,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default = "default_scenarios")]
    pub scenarios: Vec<ScenarioConfig>,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("dcmg-run")
}

fn default_scenarios() -> Vec<ScenarioConfig> {
    [Preset::Layers, Preset::LoadChanges, Preset::Noise].into_iter().map(ScenarioConfig::preset).collect()
}

/// Exactly one of `generator` and `explicit`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MicrogridConfig {
    pub generator: Option<GeneratorConfig>,
    pub explicit: Option<MicrogridSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_dgs: usize,
    pub connectivity: f64,
    #[serde(default)]
    pub topology_seed: u64,
    /// Parameter draws; nominal values when absent.
    pub param_seed: Option<u64>,
    #[serde(default = "default_spread")]
    pub spread: f64,
}

fn default_spread() -> f64 {
    0.2
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { n_dgs: 4, connectivity: 0.6, topology_seed: 0, param_seed: Some(0), spread: 0.2 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum LocalChoice {
    /// Joint design, falling back to the decoupled one.
    #[default]
    Auto,
    Joint,
    Decoupled,
}

/// Overrides on top of the library defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DesignConfig {
    pub graph_mode: Option<GraphMode>,
    pub gamma_bar: Option<f64>,
    pub p: Option<Vec<f64>>,
    pub p_bar: Option<Vec<f64>>,
    pub c1: Option<f64>,
    pub alpha_slack: Option<f64>,
    pub eta_slack: Option<f64>,
    pub eta_max: Option<f64>,
    pub eps_margin: Option<f64>,
    pub eps_topology: Option<f64>,
    pub nu_bar_nudge: Option<f64>,
    pub local_nu: Option<f64>,
    pub local_method: Option<LocalChoice>,
    /// Raise an infeasible slack cap tenfold (default on).
    pub escalate: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetpointConfig {
    pub v_desired: Option<f64>,
    /// Relative half-width of the voltage band.
    pub band: Option<f64>,
    pub alpha_v: Option<f64>,
    pub alpha_i: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Flags {
    #[serde(default = "yes")]
    pub droop_baseline: bool,
    #[serde(default = "yes")]
    pub verify: bool,
    /// Write every n-th trajectory sample.
    #[serde(default = "default_stride")]
    pub csv_stride: usize,
}

fn default_stride() -> usize {
    10
}

fn yes() -> bool {
    true
}

impl Default for Flags {
    fn default() -> Self {
        Flags { droop_baseline: true, verify: true, csv_stride: default_stride() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// All layers on at the equilibrium, 1 s.
    Equilibrium,
    /// Layer-by-layer activation from rest, 10 s.
    Layers,
    /// Load steps at 2, 4 and 8 s, 10 s.
    LoadChanges,
    /// Equilibrium start with every disturbance variance 0.5, 5 s.
    Noise,
}

/// A preset with optional overrides, or a fully custom scenario.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub preset: Option<Preset>,
    pub name: Option<String>,
    pub t_end: Option<f64>,
    pub h: Option<f64>,
    pub initial: Option<InitialState>,
    pub layers: Option<Layers>,
    pub events: Option<Vec<TimedEvent>>,
    pub disturbance: Option<DisturbanceConfig>,
}

impl ScenarioConfig {
    pub fn preset(p: Preset) -> Self {
        ScenarioConfig { preset: Some(p), ..Default::default() }
    }

    pub fn resolve(&self) -> Result<Scenario, CliError> {
        let mut s = match self.preset {
            Some(Preset::Equilibrium) => Scenario::at_equilibrium("equilibrium", 1.0),
            Some(Preset::Layers) => Scenario::layer_activation(10.0),
            Some(Preset::LoadChanges) => Scenario::load_changes(10.0),
            Some(Preset::Noise) => {
                let mut s = Scenario::at_equilibrium("noise", 5.0);
                s.disturbance = DisturbanceConfig { enabled: true, variance: Some(0.5), noise_seed: 7 };
                s
            }
            None => {
                let t_end = self.t_end.ok_or_else(|| CliError::Config("a custom scenario needs t_end".into()))?;
                let mut s = Scenario::at_equilibrium("custom", t_end);
                s.name = self.name.clone().unwrap_or_else(|| "custom".into());
                s
            }
        };
        if let Some(n) = &self.name {
            s.name = n.clone();
        }
        if let Some(t) = self.t_end {
            s.t_end = t;
            // preset events past a shortened horizon are dropped
            s.events.retain(|e| e.t <= t);
        }
        if let Some(h) = self.h {
            s.h = h;
        }
        if let Some(i) = &self.initial {
            s.initial = i.clone();
        }
        if let Some(l) = self.layers {
            s.layers = l;
        }
        if let Some(e) = &self.events {
            s.events = e.clone();
        }
        if let Some(d) = &self.disturbance {
            s.disturbance = d.clone();
        }
        if s.name.is_empty() || !s.name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return Err(CliError::Config(format!("scenario name '{}' must be [A-Za-z0-9_-]+", s.name)));
        }
        Ok(s)
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: default_out_dir(),
            microgrid: MicrogridConfig { generator: Some(GeneratorConfig::default()), explicit: None },
            design: DesignConfig::default(),
            setpoint: SetpointConfig::default(),
            flags: Flags::default(),
            scenarios: default_scenarios(),
        }
    }
}

/// Recursive table merge; `microgrid` and arrays are replaced wholesale.
fn merge(base: &mut toml::Value, over: toml::Value, depth: usize) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if !(depth == 0 && k == "microgrid") => merge(slot, v, depth + 1),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        Self::layered(&RunConfig::default(), text)
    }

    /// `base` (typically built from flags) overridden by the file contents.
    pub fn layered(base: &RunConfig, text: &str) -> Result<Self, CliError> {
        let over: toml::Value = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        let mut merged = toml::Value::try_from(base).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut merged, over, 0);
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(base: &RunConfig, path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::layered(base, &text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.microgrid.generator, &self.microgrid.explicit) {
            (Some(g), None) => {
                if g.n_dgs == 0 || !(g.connectivity > 0.0 && g.connectivity <= 1.0) || !(0.0..1.0).contains(&g.spread) {
                    return Err(CliError::Config("generator needs n_dgs >= 1, 0 < connectivity <= 1, 0 <= spread < 1".into()));
                }
            }
            (None, Some(_)) => {}
            _ => return Err(CliError::Config("microgrid needs exactly one of [microgrid.generator] and [microgrid.explicit]".into())),
        }
        if self.scenarios.is_empty() {
            return Err(CliError::Config("at least one scenario is required".into()));
        }
        let mut names = Vec::new();
        for s in &self.scenarios {
            let name = s.resolve()?.name;
            if names.contains(&name) {
                return Err(CliError::Config(format!("duplicate scenario name '{name}'")));
            }
            names.push(name);
        }
        Ok(())
    }

    pub fn scenarios(&self) -> Result<Vec<Scenario>, CliError> {
        self.scenarios.iter().map(ScenarioConfig::resolve).collect()
    }

    pub fn local_choice(&self) -> LocalChoice {
        self.design.local_method.unwrap_or_default()
    }

    pub fn escalate(&self) -> bool {
        self.design.escalate.unwrap_or(true)
    }

    pub fn design_params(&self, mg: &MicrogridSpec, distances: Option<&DMatrix<f64>>) -> Result<DesignParams, CliError> {
        let d = &self.design;
        let mut p = DesignParams::defaults(mg, distances);
        macro_rules! set {
            ($($f:ident),*) => {$( if let Some(v) = &d.$f { p.$f = v.clone(); } )*};
        }
        set!(graph_mode, gamma_bar, p, p_bar, c1, alpha_slack, eta_slack, eta_max, eps_margin, eps_topology, nu_bar_nudge, local_nu);
        p.validate(mg).map_err(|e| CliError::Config(e.to_string()))?;
        Ok(p)
    }

    pub fn setpoint_options(&self, n: usize) -> SetpointOptions {
        let mut o = SetpointOptions::defaults(n);
        let s = &self.setpoint;
        if let Some(v) = s.v_desired {
            o.v_desired = vec![v; n];
        }
        let center = o.v_desired[0];
        let band = s.band.unwrap_or(0.05);
        o.v_min = vec![(1.0 - band) * center; n];
        o.v_max = vec![(1.0 + band) * center; n];
        if let Some(a) = s.alpha_v {
            o.alpha_v = a;
        }
        if let Some(a) = s.alpha_i {
            o.alpha_i = a;
        }
        o
    }
}
