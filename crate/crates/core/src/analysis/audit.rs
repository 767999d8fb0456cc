use std::collections::HashMap;

use serde::Serialize;

use super::AnalysisError;
use crate::agent::{states_matrix, Policy};
use crate::env2d::State2;
use crate::rollouts::{ActionSource, ReplayBuffer};
use crate::LabRng;

/// Policies for the action-condition proxy: the snapshot that generated the
/// data, and the policy whose actions are being audited.
pub struct ActionAudit<'a> {
    pub data_policy: &'a Policy,
    pub current_policy: &'a Policy,
    /// Quantile of the data log-probabilities below which an action counts
    /// as improbable.
    pub quantile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditReport {
    pub transitions: usize,
    pub threshold: f64,
    pub state_violations: usize,
    pub state_violation_fraction: f64,
    /// Buffer positions of the flagged transitions.
    #[serde(skip)]
    pub flagged: Vec<usize>,
    pub action_violation_fraction: Option<f64>,
    pub action_log_prob_threshold: Option<f64>,
}

/// Spatial hash over buffer states with cell size `eps` (exact-match keys
/// when `eps` is zero).
struct StateIndex {
    eps: f64,
    cells: HashMap<(i64, i64), Vec<State2>>,
}

impl StateIndex {
    fn new(eps: f64, states: impl Iterator<Item = State2>) -> Self {
        let mut idx = Self {
            eps,
            cells: HashMap::new(),
        };
        for s in states {
            let key = idx.key(&s);
            idx.cells.entry(key).or_default().push(s);
        }
        idx
    }

    fn key(&self, s: &State2) -> (i64, i64) {
        if self.eps == 0.0 {
            (s.x.to_bits() as i64, s.y.to_bits() as i64)
        } else {
            ((s.x / self.eps).floor() as i64, (s.y / self.eps).floor() as i64)
        }
    }

    fn has_neighbour(&self, s: &State2) -> bool {
        let (kx, ky) = self.key(s);
        if self.eps == 0.0 {
            return self.cells.get(&(kx, ky)).is_some_and(|v| v.contains(s));
        }
        let r2 = self.eps * self.eps;
        for dx in -1..=1 {
            for dy in -1..=1 {
                if let Some(v) = self.cells.get(&(kx + dx, ky + dy)) {
                    if v.iter().any(|o| o.dist2(s) <= r2) {
                        return true;
                    }
                }
            }
        }
        false
    }
}

/// Counts transitions whose next state has no buffer state within `eps_d`
/// (terminal transitions excused), and optionally the fraction of next-state
/// actions from the current policy that are improbable under the data policy.
pub fn condition_audit(
    buffer: &ReplayBuffer,
    eps_d: f64,
    actions: Option<ActionAudit<'_>>,
    rng: &mut LabRng,
) -> Result<AuditReport, AnalysisError> {
    if buffer.is_empty() {
        return Err(AnalysisError::Invalid("cannot audit an empty buffer".into()));
    }
    if !(eps_d >= 0.0 && eps_d.is_finite()) {
        return Err(AnalysisError::Invalid(format!("distance threshold must be finite and >= 0, got {eps_d}")));
    }
    let index = StateIndex::new(eps_d, buffer.iter().map(|t| t.s));
    let mut flagged = Vec::new();
    for (i, t) in buffer.iter().enumerate() {
        if !t.done && !index.has_neighbour(&t.s_next) {
            flagged.push(i);
        }
    }
    let n = buffer.len();
    let (action_fraction, action_threshold) = match actions {
        None => (None, None),
        Some(audit) => {
            if !(0.0..=1.0).contains(&audit.quantile) {
                return Err(AnalysisError::Invalid(format!("quantile {} outside [0, 1]", audit.quantile)));
            }
            let states: Vec<State2> = buffer.iter().map(|t| t.s).collect();
            let data_actions = crate::agent::actions_matrix(&buffer.iter().map(|t| t.a).collect::<Vec<_>>());
            let data_lp = audit
                .data_policy
                .log_prob_of(states_matrix(&states).view(), data_actions.view())
                .map_err(|e| AnalysisError::Invalid(e.to_string()))?;
            let mut sorted = data_lp.to_vec();
            sorted.sort_by(f64::total_cmp);
            let pos = ((audit.quantile * n as f64).floor() as usize).min(n - 1);
            let threshold = sorted[pos];
            let next: Vec<State2> = buffer.iter().map(|t| t.s_next).collect();
            let next_actions = audit.current_policy.sample_actions(&next, rng);
            let lp = audit
                .data_policy
                .log_prob_of(
                    states_matrix(&next).view(),
                    crate::agent::actions_matrix(&next_actions).view(),
                )
                .map_err(|e| AnalysisError::Invalid(e.to_string()))?;
            let violations = lp.iter().filter(|&&v| v < threshold).count();
            (Some(violations as f64 / n as f64), Some(threshold))
        }
    };
    Ok(AuditReport {
        transitions: n,
        threshold: eps_d,
        state_violations: flagged.len(),
        state_violation_fraction: flagged.len() as f64 / n as f64,
        flagged,
        action_violation_fraction: action_fraction,
        action_log_prob_threshold: action_threshold,
    })
}
