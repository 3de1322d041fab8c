use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dcmg::codesign::GraphMode;
use dcmg::model::random_geometric_topology;
use dcmg_cli::config::{GeneratorConfig, LocalChoice, MicrogridConfig, RunConfig};
use dcmg_cli::pipeline::{run_pipeline, Stage, Status};
use dcmg_cli::CliError;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "dcmg", version, about = "DC microgrid control and communication co-design")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random geometric topology and print it as JSON.
    GenTopology {
        #[arg(long, default_value_t = 4)]
        n_dgs: usize,
        #[arg(long, default_value_t = 0.6)]
        connectivity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write to a file instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Optimize the voltage references and sharing ratio.
    Setpoint(RunArgs),
    /// Setpoint and local controller design.
    DesignLocal(RunArgs),
    /// Everything up to the distributed gains and communication graph.
    DesignGlobal(RunArgs),
    /// Design, then simulate every scenario (no verification).
    Simulate(RunArgs),
    /// Full pipeline with the acceptance checks forced on.
    Verify(RunArgs),
    /// Full pipeline; checks run unless disabled.
    Run(RunArgs),
}

/// Flags mirror the config fields; a config file overrides them.
#[derive(Args)]
struct RunArgs {
    /// TOML run configuration; its values override the flags.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Output directory (default dcmg-run).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Generated network size (default 4).
    #[arg(long)]
    n_dgs: Option<usize>,
    /// Connection radius on the unit square (default 0.6).
    #[arg(long)]
    connectivity: Option<f64>,
    #[arg(long)]
    topology_seed: Option<u64>,
    /// Seed of the parameter draws (default 0).
    #[arg(long)]
    param_seed: Option<u64>,
    /// Use nominal parameters instead of random draws.
    #[arg(long, conflicts_with = "param_seed")]
    nominal: bool,
    /// Relative spread of the parameter draws (default 0.2).
    #[arg(long)]
    spread: Option<f64>,
    /// Communication graph constraint: hard or soft (default soft).
    #[arg(long, value_parser = parse_mode)]
    mode: Option<GraphMode>,
    /// Upper bound on the local performance indices.
    #[arg(long)]
    gamma_bar: Option<f64>,
    #[arg(long, value_enum)]
    local_method: Option<LocalChoice>,
    /// Fail instead of raising an infeasible slack cap.
    #[arg(long)]
    no_escalate: bool,
    /// Skip the droop baseline run.
    #[arg(long)]
    no_droop: bool,
    /// Skip the acceptance checks (run only).
    #[arg(long)]
    no_verify: bool,
    /// No progress output on stderr.
    #[arg(long, short)]
    quiet: bool,
}

fn parse_mode(s: &str) -> Result<GraphMode, String> {
    match s {
        "hard" => Ok(GraphMode::Hard),
        "soft" => Ok(GraphMode::Soft),
        _ => Err(format!("expected 'hard' or 'soft', got '{s}'")),
    }
}

impl RunArgs {
    fn config(&self) -> Result<RunConfig, CliError> {
        let mut base = RunConfig::default();
        let mut g = GeneratorConfig::default();
        if let Some(n) = self.n_dgs {
            g.n_dgs = n;
        }
        if let Some(c) = self.connectivity {
            g.connectivity = c;
        }
        if let Some(s) = self.topology_seed {
            g.topology_seed = s;
        }
        if self.nominal {
            g.param_seed = None;
        } else if let Some(s) = self.param_seed {
            g.param_seed = Some(s);
        }
        if let Some(s) = self.spread {
            g.spread = s;
        }
        base.microgrid = MicrogridConfig { generator: Some(g), explicit: None };
        if let Some(o) = &self.out {
            base.out_dir = o.clone();
        }
        base.design.graph_mode = self.mode;
        base.design.gamma_bar = self.gamma_bar;
        base.design.local_method = self.local_method;
        if self.no_escalate {
            base.design.escalate = Some(false);
        }
        base.flags.droop_baseline = !self.no_droop;
        base.flags.verify = !self.no_verify;
        match &self.config {
            Some(p) => RunConfig::load(&base, p),
            None => {
                base.validate()?;
                Ok(base)
            }
        }
    }
}

#[derive(Serialize)]
struct TopologyOut {
    provenance: Vec<String>,
    n_dgs: usize,
    edges: Vec<(usize, usize)>,
    positions: Vec<[f64; 2]>,
    distances: Vec<Vec<f64>>,
    resamples: usize,
}

fn gen_topology(n: usize, connectivity: f64, seed: u64, out: Option<PathBuf>) -> Result<(), CliError> {
    let t = random_geometric_topology(n, connectivity, seed).map_err(|source| CliError::Stage { stage: "topology", source })?;
    let doc = TopologyOut {
        provenance: vec![
            format!("dcmg {}", env!("CARGO_PKG_VERSION")),
            format!("random geometric topology n_dgs={n} connectivity={connectivity} seed={seed}"),
        ],
        n_dgs: n,
        edges: t.topology.edges.clone(),
        positions: t.positions.clone(),
        distances: (0..n).map(|i| (0..n).map(|j| t.distances[(i, j)]).collect()).collect(),
        resamples: t.resamples,
    };
    let text = serde_json::to_string_pretty(&doc).map_err(|e| CliError::Io(e.to_string()))? + "\n";
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::Io(e.to_string())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cmd: Command) -> Result<(), CliError> {
    let (args, stage) = match cmd {
        Command::GenTopology { n_dgs, connectivity, seed, out } => return gen_topology(n_dgs, connectivity, seed, out),
        Command::Setpoint(a) => (a, Some(Stage::Setpoint)),
        Command::DesignLocal(a) => (a, Some(Stage::DesignLocal)),
        Command::DesignGlobal(a) => (a, Some(Stage::DesignGlobal)),
        Command::Simulate(a) => (a, Some(Stage::Simulate)),
        Command::Verify(a) => (a, Some(Stage::Verify)),
        Command::Run(a) => (a, None),
    };
    let cfg = args.config()?;
    let stage = stage.unwrap_or(if cfg.flags.verify { Stage::Verify } else { Stage::Simulate });
    let quiet = args.quiet;
    let mut log = |m: &str| {
        if !quiet {
            eprintln!("{m}");
        }
    };
    let outcome = run_pipeline(&cfg, stage, &mut log)?;
    if !quiet {
        eprintln!("outputs in {}", cfg.out_dir.display());
    }
    match outcome.failures() {
        0 => Ok(()),
        n => {
            for c in outcome.checks.iter().filter(|c| c.status == Status::Fail) {
                eprintln!("FAIL {}: {}", c.name, c.detail);
            }
            Err(CliError::Acceptance(n))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
