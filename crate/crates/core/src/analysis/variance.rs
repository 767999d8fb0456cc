use std::io::Write;

use serde::{Deserialize, Serialize};

use super::grid::GridSpec;
use super::AnalysisError;
use crate::agent::{states_matrix, Policy, QEnsemble};
use crate::env2d::{ReachSpec, State2};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReachLabel {
    /// Reachable before the final rollout step.
    Within,
    Edge,
    Unreachable,
}

impl ReachLabel {
    pub fn of(reach: &ReachSpec, s: &State2) -> Self {
        if reach.is_within_reach(s) {
            ReachLabel::Within
        } else if reach.is_edge_of_reach(s) {
            ReachLabel::Edge
        } else {
            ReachLabel::Unreachable
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ReachLabel::Within => "within",
            ReachLabel::Edge => "edge",
            ReachLabel::Unreachable => "unreachable",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VarianceMap {
    pub grid: GridSpec,
    /// Population std over critics of `Q_i(s, mean action)` per node.
    pub std: Vec<f64>,
    pub labels: Vec<ReachLabel>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceSummary {
    pub mean_std_within: f64,
    pub mean_std_edge: f64,
    pub within_cells: usize,
    pub edge_cells: usize,
}

impl VarianceMap {
    pub fn summary(&self) -> VarianceSummary {
        let mean_of = |label| {
            let vals: Vec<f64> = self
                .std
                .iter()
                .zip(&self.labels)
                .filter(|(_, l)| **l == label)
                .map(|(v, _)| *v)
                .collect();
            let m = if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            };
            (m, vals.len())
        };
        let (mean_std_within, within_cells) = mean_of(ReachLabel::Within);
        let (mean_std_edge, edge_cells) = mean_of(ReachLabel::Edge);
        VarianceSummary {
            mean_std_within,
            mean_std_edge,
            within_cells,
            edge_cells,
        }
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), AnalysisError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["x", "y", "ensemble_std", "reach"])?;
        for (i, (v, l)) in self.std.iter().zip(&self.labels).enumerate() {
            let s = self.grid.node_at(i);
            wr.write_record([s.x.to_string(), s.y.to_string(), v.to_string(), l.as_str().to_string()])?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Critic disagreement at every grid node under the policy's mean action.
pub fn ensemble_variance_map(
    q: &QEnsemble,
    policy: &Policy,
    grid: &GridSpec,
    reach: &ReachSpec,
) -> Result<VarianceMap, AnalysisError> {
    if q.len() < 2 {
        return Err(AnalysisError::Invalid("ensemble std needs at least two critics".into()));
    }
    let nodes: Vec<State2> = (0..grid.len()).map(|i| grid.node_at(i)).collect();
    let x = states_matrix(&nodes);
    let err = |e: crate::agent::AgentError| AnalysisError::Invalid(e.to_string());
    let a = policy.deterministic(x.view()).map_err(err)?;
    let values = q.values(x.view(), a.view()).map_err(err)?;
    let n = values.nrows() as f64;
    let std = values
        .columns()
        .into_iter()
        .map(|c| {
            // Shifted by the first member so equal values give exactly zero.
            let c0 = c[0];
            let m = c.iter().map(|v| v - c0).sum::<f64>() / n;
            (c.iter().map(|v| (v - c0 - m).powi(2)).sum::<f64>() / n).sqrt()
        })
        .collect();
    Ok(VarianceMap {
        grid: *grid,
        std,
        labels: nodes.iter().map(|s| ReachLabel::of(reach, s)).collect(),
    })
}
