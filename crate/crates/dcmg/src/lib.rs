//! DC microgrid modelling, dissipativity-based control and topology
//! co-design, and closed-loop simulation.
//!
//! The pipeline is: [`model`] describes the plant, [`equilibrium`] picks
//! current-sharing references, [`codesign`] synthesizes local controllers and
//! the distributed current gains with their communication graph, and [`sim`]
//! validates the result in the time domain.

pub mod codesign;
pub mod dissipativity;
pub mod equilibrium;
pub mod model;
pub mod sim;

use lmi_core::{LmiError, LmiProblem, LmiSolution, SolveOptions, SolveStatus};

#[derive(Debug, thiserror::Error)]
pub enum DcmgError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("assumption violated: {0}")]
    Assumption(String),
    #[error("malformed gain: {0}")]
    Structure(String),
    #[error("{stage} is infeasible: {reason}")]
    Infeasible { stage: &'static str, reason: String },
    #[error("{stage}: solver failed ({note})")]
    Numerical { stage: &'static str, note: String },
    #[error("simulation diverged at t = {t:.6} s: {msg}")]
    Diverged { t: f64, msg: String },
    #[error(transparent)]
    Lmi(#[from] LmiError),
}

pub(crate) enum Solved {
    Ok(LmiSolution),
    Infeasible(String),
}

/// Solves and splits the outcome into usable / infeasible / error.
pub(crate) fn solve_checked(prob: &LmiProblem, opts: &SolveOptions, stage: &'static str) -> Result<Solved, DcmgError> {
    let sol = prob.solve(opts)?;
    match sol.status {
        SolveStatus::Optimal | SolveStatus::Feasible => Ok(Solved::Ok(sol)),
        SolveStatus::Infeasible => Ok(Solved::Infeasible(sol.note)),
        SolveStatus::NumericalFailure => Err(DcmgError::Numerical { stage, note: sol.note }),
    }
}
