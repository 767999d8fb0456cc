use std::collections::HashSet;
use std::io::Write;

use rand::Rng;
use serde::Serialize;

use super::AnalysisError;
use crate::LabRng;

/// Finite deterministic MDP: `next[s * m + a]` and `reward[s * m + a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub next: Vec<usize>,
    pub reward: Vec<f64>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn new(n_states: usize, n_actions: usize, next: Vec<usize>, reward: Vec<f64>, gamma: f64) -> Result<Self, AnalysisError> {
        let mdp = Self {
            n_states,
            n_actions,
            next,
            reward,
            gamma,
        };
        mdp.validate()?;
        Ok(mdp)
    }

    pub fn validate(&self) -> Result<(), AnalysisError> {
        let cells = self.n_states * self.n_actions;
        if cells == 0 || self.next.len() != cells || self.reward.len() != cells {
            return Err(AnalysisError::Invalid("transition and reward tables must have n_states * n_actions entries".into()));
        }
        if let Some(&bad) = self.next.iter().find(|&&s| s >= self.n_states) {
            return Err(AnalysisError::Invalid(format!("transition into state {bad} of {}", self.n_states)));
        }
        if !(self.gamma >= 0.0 && self.gamma < 1.0) {
            return Err(AnalysisError::Invalid(format!("gamma {} outside [0, 1)", self.gamma)));
        }
        Ok(())
    }

    /// Uniformly random transitions and rewards in `[-1, 1]`.
    pub fn random(n_states: usize, n_actions: usize, gamma: f64, rng: &mut LabRng) -> Self {
        let cells = n_states * n_actions;
        Self {
            n_states,
            n_actions,
            next: (0..cells).map(|_| rng.random_range(0..n_states)).collect(),
            reward: (0..cells).map(|_| rng.random_range(-1.0..=1.0)).collect(),
            gamma,
        }
    }

    pub fn step(&self, s: usize, a: usize) -> (usize, f64) {
        (self.next[s * self.n_actions + a], self.reward[s * self.n_actions + a])
    }

    /// `Q^pi` for a deterministic policy, by fixed-point iteration to
    /// machine precision.
    pub fn q_of_policy(&self, policy: &[usize]) -> Vec<f64> {
        let mut v = vec![0.0; self.n_states];
        for _ in 0..1_000_000 {
            let next: Vec<f64> = (0..self.n_states)
                .map(|s| {
                    let (s2, r) = self.step(s, policy[s]);
                    r + self.gamma * v[s2]
                })
                .collect();
            let done = next.iter().zip(&v).all(|(a, b)| a == b);
            v = next;
            if done {
                break;
            }
        }
        (0..self.n_states * self.n_actions)
            .map(|i| {
                let (s2, r) = self.step(i / self.n_actions, i % self.n_actions);
                r + self.gamma * v[s2]
            })
            .collect()
    }
}

/// Soft backup of one tabular entry from explicit critic tables.
#[allow(clippy::too_many_arguments)]
pub fn tabular_soft_backup(
    mdp: &TabularMdp,
    critics: &[Vec<f64>],
    set: usize,
    s: usize,
    a: usize,
    next_action: usize,
    next_log_prob: f64,
    alpha: f64,
    done: f64,
) -> f64 {
    let (s2, r) = mdp.step(s, a);
    let idx = s2 * mdp.n_actions + next_action;
    let mut q = critics[0][idx];
    for c in critics.iter().take(set).skip(1) {
        if c[idx] < q {
            q = c[idx];
        }
    }
    r + mdp.gamma * (1.0 - done) * (q - alpha * next_log_prob)
}

/// A rollout `(s_0, a_0), ..., (s_k, a_k)` through a tabular MDP.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularRollout {
    pub states: Vec<usize>,
    pub actions: Vec<usize>,
}

impl TabularRollout {
    pub fn k(&self) -> usize {
        self.states.len() - 1
    }

    fn validate(&self, mdp: &TabularMdp) -> Result<(), AnalysisError> {
        if self.states.len() < 2 || self.states.len() != self.actions.len() {
            return Err(AnalysisError::MalformedRollout("need k + 1 >= 2 states with one action each".into()));
        }
        if self.states.iter().any(|&s| s >= mdp.n_states) || self.actions.iter().any(|&a| a >= mdp.n_actions) {
            return Err(AnalysisError::MalformedRollout("state or action index out of range".into()));
        }
        for t in 0..self.k() {
            let (s2, _) = mdp.step(self.states[t], self.actions[t]);
            if s2 != self.states[t + 1] {
                return Err(AnalysisError::MalformedRollout(format!(
                    "step {t}: ({}, {}) leads to {s2}, not {}",
                    self.states[t],
                    self.actions[t],
                    self.states[t + 1]
                )));
            }
        }
        let distinct: HashSet<usize> = self.states.iter().copied().collect();
        if distinct.len() != self.states.len() {
            return Err(AnalysisError::MalformedRollout("rollout states must be distinct".into()));
        }
        Ok(())
    }

    /// A uniformly random rollout with distinct states, if one exists.
    pub fn random(mdp: &TabularMdp, k: usize, rng: &mut LabRng) -> Option<Self> {
        for _ in 0..100 {
            let mut states = vec![rng.random_range(0..mdp.n_states)];
            let mut actions = Vec::new();
            while states.len() <= k {
                let s = *states.last().unwrap();
                let options: Vec<usize> = (0..mdp.n_actions)
                    .filter(|&a| !states.contains(&mdp.step(s, a).0))
                    .collect();
                if options.is_empty() {
                    break;
                }
                let a = options[rng.random_range(0..options.len())];
                actions.push(a);
                states.push(mdp.step(s, a).0);
            }
            if states.len() == k + 1 {
                actions.push(rng.random_range(0..mdp.n_actions));
                return Some(Self { states, actions });
            }
        }
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PropagationStep {
    pub t: usize,
    pub measured: f64,
    /// `gamma^(k - t) * epsilon`, the error with exact backups.
    pub exact: f64,
    /// `delta * (1 - gamma^(k - t)) / (1 - gamma) + gamma^(k - t) * |epsilon|`.
    pub bound: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropagationReport {
    pub epsilon: f64,
    pub delta: f64,
    pub k: usize,
    pub sweeps: usize,
    pub steps: Vec<PropagationStep>,
    pub violations: usize,
}

impl PropagationReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), AnalysisError> {
        let mut wr = csv::Writer::from_writer(w);
        for s in &self.steps {
            wr.serialize(s)?;
        }
        wr.flush()?;
        Ok(())
    }
}

/// Policy-evaluation backups restricted to the rollout pairs `t < k`, with
/// the final pair `(s_k, a_k)` never updated and held at `Q^pi + epsilon`.
/// Each backup may add a Bellman error drawn uniformly from `[-delta, delta]`.
/// Starts from the exact `Q^pi` and runs `sweeps` synchronous sweeps
/// (at least `k`).
pub fn propagate_error_check(
    mdp: &TabularMdp,
    rollout: &TabularRollout,
    epsilon: f64,
    delta: f64,
    sweeps: usize,
    rng: &mut LabRng,
) -> Result<PropagationReport, AnalysisError> {
    mdp.validate()?;
    rollout.validate(mdp)?;
    if !(delta >= 0.0) || !epsilon.is_finite() {
        return Err(AnalysisError::Invalid("delta must be >= 0 and epsilon finite".into()));
    }
    let k = rollout.k();
    let sweeps = sweeps.max(k);
    let mut policy = vec![0; mdp.n_states];
    for (&s, &a) in rollout.states.iter().zip(&rollout.actions) {
        policy[s] = a;
    }
    let q_pi = mdp.q_of_policy(&policy);
    let idx = |t: usize| rollout.states[t] * mdp.n_actions + rollout.actions[t];
    let mut q: Vec<f64> = (0..=k).map(|t| q_pi[idx(t)]).collect();
    q[k] += epsilon;
    for _ in 0..sweeps {
        let prev = q.clone();
        for t in 0..k {
            let (_, r) = mdp.step(rollout.states[t], rollout.actions[t]);
            let noise = if delta > 0.0 { rng.random_range(-delta..=delta) } else { 0.0 };
            q[t] = r + mdp.gamma * prev[t + 1] + noise;
        }
    }
    let g = mdp.gamma;
    let mut violations = 0;
    let steps = (0..k)
        .map(|t| {
            let decay = g.powi((k - t) as i32);
            let measured = q[t] - q_pi[idx(t)];
            let exact = decay * epsilon;
            let accumulated = if g == 0.0 { delta } else { delta * (1.0 - decay) / (1.0 - g) };
            let bound = accumulated + decay * epsilon.abs();
            // Slack for rounding in the backups themselves.
            if measured.abs() > bound + 1e-9 * (1.0 + bound) {
                violations += 1;
            }
            PropagationStep { t, measured, exact, bound }
        })
        .collect();
    Ok(PropagationReport {
        epsilon,
        delta,
        k,
        sweeps,
        steps,
        violations,
    })
}

/// Chain MDP `0 -> 1 -> ... -> n-1` under action 0 (action 1 stays put),
/// with the given per-state rewards.
pub fn chain_mdp(rewards: &[f64], gamma: f64) -> TabularMdp {
    let n = rewards.len();
    let mut next = Vec::with_capacity(2 * n);
    let mut reward = Vec::with_capacity(2 * n);
    for s in 0..n {
        next.push((s + 1).min(n - 1));
        reward.push(rewards[s]);
        next.push(s);
        reward.push(rewards[s]);
    }
    TabularMdp {
        n_states: n,
        n_actions: 2,
        next,
        reward,
        gamma,
    }
}
