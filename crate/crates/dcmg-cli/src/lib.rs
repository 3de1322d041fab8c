//! Batch front end for the dcmg pipeline: TOML run configs, stage
//! orchestration and report / CSV emission.

pub mod config;
pub mod pipeline;

use dcmg::DcmgError;

/// Exit codes: 0 ok, 1 parse or config, 2 infeasible design, 3 simulation
/// failure, 4 failed acceptance checks.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("{stage} stage failed: {source}")]
    Stage { stage: &'static str, source: DcmgError },
    #[error("{0} acceptance check(s) failed")]
    Acceptance(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => 1,
            CliError::Stage { source: DcmgError::Invalid(_), .. } => 1,
            CliError::Stage { source: DcmgError::Diverged { .. }, .. } => 3,
            CliError::Stage { stage: "simulation", .. } => 3,
            CliError::Stage { .. } => 2,
            CliError::Acceptance(_) => 4,
        }
    }
}
