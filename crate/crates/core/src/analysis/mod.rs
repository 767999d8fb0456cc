//! Diagnostics: a dynamic-programming value oracle on a lattice, critic
//! disagreement maps, a tabular error-propagation checker, data-condition
//! audits for replay buffers, and Q-value traces with a divergence detector.

mod audit;
mod grid;
mod tabular;
mod trace;
mod variance;

pub use audit::{condition_audit, ActionAudit, AuditReport};
pub use grid::{action_lattice, oracle_values, value_iteration, DpConfig, GridSpec, ValueGrid};
pub use tabular::{
    chain_mdp, propagate_error_check, tabular_soft_backup, PropagationReport, PropagationStep, TabularMdp,
    TabularRollout,
};
pub use trace::QTrace;
pub use variance::{ensemble_variance_map, ReachLabel, VarianceMap, VarianceSummary};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("value iteration did not converge in {iterations} sweeps (residual {residual})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("malformed rollout: {0}")]
    MalformedRollout(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
