//! Soft actor-critic with an `N`-critic ensemble. The critic targets come in
//! three flavours ([`TargetMode`]): clipped double-Q, the minimum over the
//! whole ensemble plus an action-gradient diversity regulariser, and
//! clipped double-Q with oracle values substituted at edge-of-reach states.

mod actor;
mod critic;
mod policy;
mod train;


pub use actor::{actor_loss_and_grads, temperature_grad, ActorStats};
pub use critic::{
    bellman_targets, critic_loss_and_grads, diversity_term, soft_targets, state_action_matrix, Critic, CriticStats,
    MinOver, Oracle, QEnsemble, TargetMode, TargetReport,
};
pub use policy::{actions_matrix, squashed_log_prob, states_matrix, Greedy, Policy, PolicySample};
use critic::check_finite_params;
pub use train::{evaluate_policy, probe_q, train_epoch, EpochOutcome, EpochPlan};

use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{load_checkpoint, save_checkpoint, Adam, AdamConfig, ApproxError};
use crate::dynamics::DynamicsError;
use crate::env2d::EnvSpec;
use crate::rollouts::{RolloutError, Transition};
use crate::LabRng;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("empty batch")]
    EmptyBatch,
    #[error("oracle-patched targets need an oracle value table")]
    MissingOracle,
    #[error("non-finite loss: {0}")]
    NonFiniteLoss(String),
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error("shape: {0}")]
    Shape(String),
    #[error(transparent)]
    Approx(#[from] ApproxError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub n_critics: usize,
    pub mode: TargetMode,
    /// Weight of the action-gradient diversity term.
    pub eta: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub temperature_lr: f64,
    pub batch_size: usize,
    pub init_temperature: f64,
    pub auto_temperature: bool,
    /// Defaults to minus the action dimension.
    pub target_entropy: Option<f64>,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            n_critics: 2,
            mode: TargetMode::Base,
            eta: 0.0,
            tau: 0.005,
            actor_lr: 3e-4,
            critic_lr: 3e-4,
            temperature_lr: 3e-4,
            batch_size: 256,
            init_temperature: 1.0,
            auto_temperature: true,
            target_entropy: None,
        }
    }
}

impl AgentConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            out.push("agent.hidden: need at least one positive width".into());
        }
        if self.n_critics < 2 {
            out.push("agent.n_critics: need at least 2".into());
        }
        if !(self.eta >= 0.0 && self.eta.is_finite()) {
            out.push("agent.eta: must be finite and >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.tau) {
            out.push("agent.tau: must be in [0, 1]".into());
        }
        for (name, v) in [
            ("agent.actor_lr", self.actor_lr),
            ("agent.critic_lr", self.critic_lr),
            ("agent.temperature_lr", self.temperature_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name}: must be finite and >= 0"));
            }
        }
        if self.batch_size == 0 {
            out.push("agent.batch_size: must be positive".into());
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            out.push("agent.init_temperature: must be positive".into());
        }
        out
    }

    pub fn target_entropy(&self) -> f64 {
        self.target_entropy.unwrap_or(-2.0)
    }
}

/// Column-major view of a minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub dones: Array1<f64>,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition]) -> Self {
        let b = ts.len();
        Self {
            states: Array2::from_shape_fn((b, 2), |(i, j)| if j == 0 { ts[i].s.x } else { ts[i].s.y }),
            actions: Array2::from_shape_fn((b, 2), |(i, j)| if j == 0 { ts[i].a.dx } else { ts[i].a.dy }),
            rewards: Array1::from_shape_fn(b, |i| ts[i].r),
            next_states: Array2::from_shape_fn((b, 2), |(i, j)| {
                if j == 0 {
                    ts[i].s_next.x
                } else {
                    ts[i].s_next.y
                }
            }),
            dones: Array1::from_shape_fn(b, |i| if ts[i].done { 1.0 } else { 0.0 }),
        }
    }

    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct UpdateStats {
    pub critic: CriticStats,
    pub actor: ActorStats,
    pub temperature: f64,
    pub patched: usize,
}

#[derive(Debug, Clone)]
pub struct Agent {
    pub config: AgentConfig,
    pub gamma: f64,
    pub policy: Policy,
    pub q: QEnsemble,
    log_temperature: Array1<f64>,
    actor_opt: Adam,
    critic_opt: Adam,
    temperature_opt: Adam,
    oracle: Option<Oracle>,
}

impl Agent {
    pub fn new(config: AgentConfig, env: &EnvSpec, oracle: Option<Oracle>, rng: &mut LabRng) -> Result<Self, AgentError> {
        let problems = config.problems();
        if !problems.is_empty() {
            return Err(AgentError::Config(problems.join("; ")));
        }
        if config.mode == TargetMode::OraclePatch && oracle.is_none() {
            return Err(AgentError::MissingOracle);
        }
        let policy = Policy::new(&config.hidden, env.a_max, rng);
        let q = QEnsemble::new(config.n_critics, &config.hidden, rng)?;
        Ok(Self::from_parts(config, env.gamma, policy, q, oracle))
    }

    pub fn from_parts(config: AgentConfig, gamma: f64, policy: Policy, q: QEnsemble, oracle: Option<Oracle>) -> Self {
        let log_temperature = Array1::from_elem(1, config.init_temperature.ln());
        Self {
            actor_opt: Adam::new(&policy.net, AdamConfig::with_lr(config.actor_lr)),
            critic_opt: Adam::new(&q.online, AdamConfig::with_lr(config.critic_lr)),
            temperature_opt: Adam::new(&log_temperature, AdamConfig::with_lr(config.temperature_lr)),
            log_temperature,
            config,
            gamma,
            policy,
            q,
            oracle,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature[0].exp()
    }

    pub fn oracle(&self) -> Option<&Oracle> {
        self.oracle.as_ref()
    }

    /// One critic step, one actor step, one temperature step, then Polyak
    /// averaging of the target critics.
    pub fn update(&mut self, batch: &Batch, rng: &mut LabRng) -> Result<UpdateStats, AgentError> {
        let alpha = self.temperature();
        let report = bellman_targets(
            batch,
            self.config.mode,
            &self.q,
            &self.policy,
            alpha,
            self.gamma,
            self.oracle.as_ref(),
            rng,
        )?;
        let sa = state_action_matrix(batch.states.view(), batch.actions.view());
        let (critic, grads) = critic_loss_and_grads(&self.q.online, sa.view(), report.targets.view(), self.config.eta)?;
        self.critic_opt.step(&mut self.q.online, &grads)?;
        check_finite_params(&self.q.online, "critics")?;

        let eps = self.policy.draw_noise(batch.len(), rng);
        let set = self.config.mode.min_set(self.q.len());
        let critic_view = MinOver {
            net: &self.q.online,
            set,
        };
        let (actor, grads, sample) = actor_loss_and_grads(&self.policy, &critic_view, batch.states.view(), eps, alpha)?;
        self.actor_opt.step(&mut self.policy.net, &grads)?;

        if self.config.auto_temperature {
            let g = Array1::from_elem(1, temperature_grad(&sample.log_prob, self.config.target_entropy()));
            self.temperature_opt.step(&mut self.log_temperature, &g)?;
        }
        self.q.soft_update(self.config.tau);
        Ok(UpdateStats {
            critic,
            actor,
            temperature: alpha,
            patched: report.patched,
        })
    }

    /// Writes `policy`, `critics` and `target_critics` checkpoints under `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), AgentError> {
        std::fs::create_dir_all(dir).map_err(ApproxError::from)?;
        save_checkpoint(&self.policy, &dir.join("policy"))?;
        save_checkpoint(&self.q.online, &dir.join("critics"))?;
        save_checkpoint(&self.q.target, &dir.join("target_critics"))?;
        Ok(())
    }

    pub fn load(&mut self, dir: &Path) -> Result<(), AgentError> {
        load_checkpoint(&mut self.policy, &dir.join("policy"))?;
        load_checkpoint(&mut self.q.online, &dir.join("critics"))?;
        load_checkpoint(&mut self.q.target, &dir.join("target_critics"))?;
        Ok(())
    }
}
