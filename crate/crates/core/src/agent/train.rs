use std::time::Instant;

use super::policy::{states_matrix, Greedy, Policy};
use super::{Agent, AgentError, Batch, UpdateStats};
use crate::dynamics::{DynamicsModel, Penalty};
use crate::env2d::{self, reach_boxes, EnvSpec, State2};
use crate::harness::MetricsRecord;
use crate::rollouts::{collect_rollouts, mixed_batch, ActionSource, ReplayBuffer, RolloutBatch};
use crate::LabRng;

/// Everything one training epoch needs besides the agent and its buffer.
pub struct EpochPlan<'a> {
    pub env: &'a EnvSpec,
    pub model: &'a DynamicsModel,
    pub penalty: Option<Penalty>,
    pub real: Option<&'a ReplayBuffer>,
    pub real_ratio: f64,
    /// Rollout start states; `None` draws fresh initial states every epoch.
    pub start_pool: Option<&'a [State2]>,
    pub rollouts: usize,
    pub updates: usize,
    pub probe_states: &'a [State2],
    pub eval_starts: &'a [State2],
}

#[derive(Debug, Clone)]
pub struct EpochOutcome {
    pub record: MetricsRecord,
    pub rollouts: RolloutBatch,
    /// Mean wall-clock seconds per gradient update (NaN without updates).
    pub update_seconds: f64,
}

/// Mean undiscounted `H`-step return of the mean-action policy in the true
/// environment, one episode per start state.
pub fn evaluate_policy(policy: &Policy, env: &EnvSpec, starts: &[State2]) -> Result<f64, AgentError> {
    if starts.is_empty() {
        return Ok(f64::NAN);
    }
    let greedy = Greedy(policy);
    // The greedy policy ignores the rng; any generator satisfies the trait.
    let mut unused = <LabRng as rand::SeedableRng>::seed_from_u64(0);
    let mut states = starts.to_vec();
    let mut total = 0.0;
    for _ in 0..env.horizon {
        let actions = greedy.sample_actions(&states, &mut unused);
        for (s, a) in states.iter_mut().zip(&actions) {
            let (next, r) = env2d::step(*s, *a, &env.reward, env.a_max).map_err(|e| AgentError::Shape(e.to_string()))?;
            total += r;
            *s = next;
        }
    }
    Ok(total / starts.len() as f64)
}

/// Mean and max over critics and probe states of `Q_i(s, mean action)`.
pub fn probe_q(agent: &Agent, probes: &[State2]) -> Result<(f64, f64), AgentError> {
    if probes.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let x = states_matrix(probes);
    let a = agent.policy.deterministic(x.view())?;
    let q = agent.q.values(x.view(), a.view())?;
    Ok((q.mean().unwrap(), q.fold(f64::NEG_INFINITY, |m, &v| m.max(v))))
}

/// One iteration of the model-based loop: collect `k`-step rollouts with the
/// current policy, store them, run the gradient updates on mixed batches,
/// then evaluate.
pub fn train_epoch(
    agent: &mut Agent,
    plan: &EpochPlan<'_>,
    buffer: &mut ReplayBuffer,
    epoch: u32,
    rollout_rng: &mut LabRng,
    agent_rng: &mut LabRng,
) -> Result<EpochOutcome, AgentError> {
    let env = plan.env;
    let fresh;
    let pool = match plan.start_pool {
        Some(p) => p,
        None => {
            fresh = (0..plan.rollouts.max(1))
                .map(|_| env2d::sample_initial(rollout_rng, env))
                .collect::<Vec<_>>();
            &fresh
        }
    };
    let batch = collect_rollouts(
        plan.model,
        plan.penalty,
        &agent.policy,
        pool,
        env.rollout_len,
        plan.rollouts,
        epoch,
        rollout_rng,
    )?;
    let reach = reach_boxes(env);
    let n_tr = batch.transitions.len();
    let (mut model_reward, mut true_reward, mut edge) = (0.0, 0.0, 0usize);
    for (t, pen) in batch.transitions.iter().zip(&batch.penalties) {
        let weight = plan.penalty.map_or(0.0, |p| p.weight);
        model_reward += t.r + weight * pen;
        true_reward += env.reward.value(&State2::new(t.s.x + t.a.dx, t.s.y + t.a.dy));
        if reach.is_edge_of_reach(&t.s_next) {
            edge += 1;
        }
    }
    let penalty_mean = if n_tr > 0 {
        batch.penalties.iter().sum::<f64>() / n_tr as f64
    } else {
        f64::NAN
    };
    buffer.insert_epoch(epoch, batch.transitions.clone());

    let mut sums = UpdateStats::default();
    let mut patched = 0usize;
    let start = Instant::now();
    let mut sampled = Vec::with_capacity(agent.config.batch_size);
    for _ in 0..plan.updates {
        sampled.clear();
        sampled.extend(mixed_batch(plan.real, buffer, plan.real_ratio, agent.config.batch_size, agent_rng)?);
        let b = Batch::from_transitions(&sampled);
        let s = agent.update(&b, agent_rng)?;
        sums.critic.loss += s.critic.loss;
        sums.critic.mse += s.critic.mse;
        sums.critic.diversity += s.critic.diversity;
        sums.actor.loss += s.actor.loss;
        sums.actor.mean_log_prob += s.actor.mean_log_prob;
        patched += s.patched;
    }
    let elapsed = start.elapsed().as_secs_f64();
    let g = plan.updates as f64;
    let avg = |v: f64| if plan.updates > 0 { v / g } else { f64::NAN };

    let (mean_q, max_q) = probe_q(agent, plan.probe_states)?;
    let eval_return = evaluate_policy(&agent.policy, env, plan.eval_starts)?;
    let per_tr = |v: f64| if n_tr > 0 { v / n_tr as f64 } else { f64::NAN };
    let record = MetricsRecord {
        epoch,
        eval_return,
        mean_q,
        max_q,
        critic_loss: avg(sums.critic.loss),
        critic_mse: avg(sums.critic.mse),
        diversity: avg(sums.critic.diversity),
        actor_loss: avg(sums.actor.loss),
        temperature: agent.temperature(),
        entropy: -avg(sums.actor.mean_log_prob),
        mean_model_reward: per_tr(model_reward),
        mean_true_reward: per_tr(true_reward),
        penalty_mean,
        edge_fraction: per_tr(edge as f64),
        patched_fraction: avg(patched as f64 / agent.config.batch_size as f64),
        aborted_rollouts: batch.aborted.len() as u32,
        buffer_size: buffer.len() as u64,
        updates: plan.updates as u32,
    };
    Ok(EpochOutcome {
        record,
        rollouts: batch,
        update_seconds: avg(elapsed),
    })
}
