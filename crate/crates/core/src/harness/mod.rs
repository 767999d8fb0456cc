//! Experiment orchestration: TOML configuration with dotted-path overrides,
//! seeded end-to-end runs with per-epoch metrics, parameter sweeps, the
//! critic-ensemble timing benchmark, and plot-data emission.

mod config;
mod plot;
mod run;
mod sweep;

pub use config::{
    apply_override, AnalysisConfig, Endpoint, ExperimentConfig, ModelConfig, ModelVariant, PenaltyChoice,
    TrainingConfig,
};
pub use plot::{emit_plotdata, FIGURE_IDS};
pub use run::{build_model, offline_dataset, oracle_for, read_metrics, run, RunStatus, RunSummary};
pub use sweep::{sweep, timing_bench, SweepPoint, TimingRow};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentError;
use crate::analysis::AnalysisError;
use crate::approximator::ApproxError;
use crate::dynamics::DynamicsError;
use crate::rollouts::RolloutError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid config: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("invalid sweep axis `{axis}`: {reason}")]
    InvalidAxis { axis: String, reason: String },
    #[error("unknown figure id `{0}`")]
    UnknownFigure(String),
    #[error("io: {0}")]
    Io(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Approx(#[from] ApproxError),
}

impl HarnessError {
    /// Stable machine-readable kind for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            HarnessError::InvalidConfig(_) => "invalid_config",
            HarnessError::Parse(_) => "parse",
            HarnessError::InvalidAxis { .. } => "invalid_axis",
            HarnessError::UnknownFigure(_) => "unknown_figure",
            HarnessError::Io(_) => "io",
            HarnessError::Csv(_) => "csv",
            HarnessError::Agent(_) => "agent",
            HarnessError::Analysis(_) => "analysis",
            HarnessError::Dynamics(_) => "dynamics",
            HarnessError::Rollout(_) => "rollout",
            HarnessError::Approx(_) => "approximator",
        }
    }

    /// Offending fields for config errors, empty otherwise.
    pub fn details(&self) -> Vec<String> {
        match self {
            HarnessError::InvalidConfig(p) => p.clone(),
            _ => Vec::new(),
        }
    }
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: u32,
    /// Mean undiscounted return of the mean-action policy in the true env.
    pub eval_return: f64,
    pub mean_q: f64,
    pub max_q: f64,
    pub critic_loss: f64,
    pub critic_mse: f64,
    pub diversity: f64,
    pub actor_loss: f64,
    pub temperature: f64,
    pub entropy: f64,
    /// Per-step model reward before any penalty.
    pub mean_model_reward: f64,
    /// True reward of the same `(s, a)` pairs.
    pub mean_true_reward: f64,
    pub penalty_mean: f64,
    /// Fraction of rollout next states at the edge of reach.
    pub edge_fraction: f64,
    pub patched_fraction: f64,
    pub aborted_rollouts: u32,
    pub buffer_size: u64,
    pub updates: u32,
}

#[cfg(test)]
mod tests;
