use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::{Endpoint, ExperimentConfig, ModelVariant};
use super::{HarnessError, MetricsRecord};
use crate::agent::{states_matrix, train_epoch, Agent, AgentError, EpochPlan, Greedy, Oracle, TargetMode};
use crate::analysis::{ensemble_variance_map, oracle_values, DpConfig, GridSpec, QTrace, ValueGrid, VarianceSummary};
use crate::approximator::ApproxError;
use crate::dynamics::{train_ensemble, DynamicsModel, RandomModel, TrainReport};
use crate::env2d::{self, reach_boxes, Action2, EnvSpec, State2};
use crate::rollouts::{ActionSource, ReplayBuffer, Transition};
use crate::{substream, LabRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    /// Training stopped early because a loss or gradient stopped being finite.
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub status: RunStatus,
    pub mode: TargetMode,
    pub seed: u64,
    pub epochs_completed: usize,
    pub final_eval_return: f64,
    pub dp_optimal_return: f64,
    pub return_fraction: f64,
    pub oracle_max_value: f64,
    pub final_mean_q: f64,
    pub peak_mean_q: f64,
    /// Mean probe Q over the last ten epochs.
    pub tail_mean_q: f64,
    /// First epoch with mean Q above ten times the oracle maximum.
    pub divergence_epoch: Option<u32>,
    /// Run-wide per-step model reward (penalty excluded).
    pub mean_model_reward: f64,
    pub mean_true_reward: f64,
    pub mean_update_seconds: f64,
    pub ensemble_std: Option<VarianceSummary>,
    pub model_holdout_delta_mse: Option<f64>,
    pub model_holdout_reward_mse: Option<f64>,
    pub message: Option<String>,
}

pub(crate) const METRICS_HEADER: [&str; 18] = [
    "epoch",
    "eval_return",
    "mean_q",
    "max_q",
    "critic_loss",
    "critic_mse",
    "diversity",
    "actor_loss",
    "temperature",
    "entropy",
    "mean_model_reward",
    "mean_true_reward",
    "penalty_mean",
    "edge_fraction",
    "patched_fraction",
    "aborted_rollouts",
    "buffer_size",
    "updates",
];

type OracleKey = String;

fn oracle_cache() -> &'static Mutex<HashMap<OracleKey, Arc<ValueGrid>>> {
    static CACHE: OnceLock<Mutex<HashMap<OracleKey, Arc<ValueGrid>>>> = OnceLock::new();
    CACHE.get_or_init(Default::default)
}

/// DP oracle for an environment, memoised per process.
pub fn oracle_for(env: &EnvSpec, dp: &DpConfig) -> Result<Arc<ValueGrid>, HarnessError> {
    let key = serde_json::to_string(&(env, dp)).expect("env and dp config serialize");
    if let Some(v) = oracle_cache().lock().unwrap().get(&key) {
        return Ok(v.clone());
    }
    let grid = Arc::new(oracle_values(env, dp)?);
    oracle_cache().lock().unwrap().insert(key, grid.clone());
    Ok(grid)
}

/// Uniform `(s, a)` pairs over the final reach box padded by one unit,
/// labelled with the true dynamics.
pub fn offline_dataset(env: &EnvSpec, size: usize, rng: &mut LabRng) -> Vec<Transition> {
    let region = reach_boxes(env).at(env.rollout_len).expand(1.0);
    (0..size)
        .map(|i| {
            let s = State2::new(
                rng.random_range(region.lo.x..=region.hi.x),
                rng.random_range(region.lo.y..=region.hi.y),
            );
            let a = Action2::new(
                rng.random_range(-env.a_max..=env.a_max),
                rng.random_range(-env.a_max..=env.a_max),
            );
            let (s_next, r) = env2d::step(s, a, &env.reward, env.a_max).expect("sampled action is in bounds");
            Transition {
                epoch: 0,
                traj: i as u32,
                step_index: 0,
                s,
                a,
                r,
                s_next,
                done: false,
            }
        })
        .collect()
}

/// Builds the configured dynamics model. Returns the offline dataset when
/// one was generated and the learned-model training report when one was fit.
pub fn build_model(
    cfg: &ExperimentConfig,
    rng: &mut LabRng,
) -> Result<(DynamicsModel, Vec<Transition>, Option<TrainReport>), HarnessError> {
    let env = &cfg.env;
    let m = &cfg.model;
    let data = if m.needs_learned() || cfg.training.real_ratio > 0.0 {
        offline_dataset(env, m.dataset_size, rng)
    } else {
        Vec::new()
    };
    let mut report = None;
    let mut learned = None;
    if m.needs_learned() {
        let (ens, rep) = train_ensemble(&data, &m.ensemble, env.a_max, rng)?;
        learned = Some(DynamicsModel::Learned(ens));
        report = Some(rep);
    }
    let endpoint = |e: Endpoint, rng: &mut LabRng| -> DynamicsModel {
        match e {
            Endpoint::True => DynamicsModel::True {
                field: env.reward.clone(),
                a_max: env.a_max,
            },
            Endpoint::Learned => learned.clone().expect("learned model fit above"),
            Endpoint::Random => DynamicsModel::Random(RandomModel::new(&m.random_hidden, env.a_max, rng)),
        }
    };
    let model = match m.variant {
        ModelVariant::True => endpoint(Endpoint::True, rng),
        ModelVariant::Learned => endpoint(Endpoint::Learned, rng),
        ModelVariant::Random => endpoint(Endpoint::Random, rng),
        ModelVariant::Interpolated => {
            let base = endpoint(m.base, rng);
            let target = endpoint(m.target, rng);
            DynamicsModel::interpolated(base, target, m.alpha)?
        }
    };
    Ok((model, data, report))
}

fn create(path: &Path) -> Result<BufWriter<File>, HarnessError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))
}

fn is_non_finite(e: &AgentError) -> bool {
    matches!(
        e,
        AgentError::NonFiniteLoss(_) | AgentError::Approx(ApproxError::NonFiniteGradient { .. })
    )
}

/// Rollout plot rows `(epoch, traj, t, x, y)` for the first `n` trajectories.
fn write_trajectories<W: Write>(w: &mut csv::Writer<W>, transitions: &[Transition], n: usize) -> Result<(), HarnessError> {
    let mut kept: Vec<&Transition> = transitions.iter().filter(|t| (t.traj as usize) < n).collect();
    kept.sort_by_key(|t| (t.traj, t.step_index));
    for (i, t) in kept.iter().enumerate() {
        w.serialize((t.epoch, t.traj, t.step_index, t.s.x, t.s.y))?;
        let last = kept.get(i + 1).is_none_or(|next| next.traj != t.traj);
        if last {
            w.serialize((t.epoch, t.traj, t.step_index + 1, t.s_next.x, t.s_next.y))?;
        }
    }
    Ok(())
}

/// Greedy episodes in the true environment as `(episode, t, x, y)` rows.
fn write_eval_trajectories(path: &Path, agent: &Agent, env: &EnvSpec, starts: &[State2]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["episode", "t", "x", "y"])?;
    let mut states = starts.to_vec();
    let mut unused = substream(0, "unused");
    for (i, s) in states.iter().enumerate() {
        w.serialize((i, 0, s.x, s.y))?;
    }
    for t in 1..=env.horizon {
        let actions = Greedy(&agent.policy).sample_actions(&states, &mut unused);
        for (i, (s, a)) in states.iter_mut().zip(&actions).enumerate() {
            *s = State2::new(s.x + a.dx, s.y + a.dy);
            w.serialize((i, t, s.x, s.y))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Mean action on a lattice as `(x, y, dx, dy)` rows.
fn write_policy_field(path: &Path, agent: &Agent, grid: &GridSpec) -> Result<(), HarnessError> {
    let nodes: Vec<State2> = (0..grid.len()).map(|i| grid.node_at(i)).collect();
    let a = agent.policy.deterministic(states_matrix(&nodes).view())?;
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["x", "y", "dx", "dy"])?;
    for (i, s) in nodes.iter().enumerate() {
        w.serialize((s.x, s.y, a[[i, 0]], a[[i, 1]]))?;
    }
    w.flush()?;
    Ok(())
}

/// Runs one experiment end to end and writes its artifacts to
/// `config.output_dir`.
pub fn run(cfg: &ExperimentConfig) -> Result<RunSummary, HarnessError> {
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::Io(format!("{}: {e}", dir.display())))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml())?;

    let env = &cfg.env;
    let t = &cfg.training;
    let reach = reach_boxes(env);
    let oracle = oracle_for(env, &cfg.analysis.dp)?;

    let mut model_rng = substream(cfg.seed, "model");
    let (model, data, train_report) = build_model(cfg, &mut model_rng)?;
    if let Some(rep) = &train_report {
        std::fs::write(
            dir.join("model_report.json"),
            serde_json::to_string_pretty(rep).expect("report serializes"),
        )?;
    }
    let real = (t.real_ratio > 0.0).then(|| ReplayBuffer::from_transitions(data));

    let mut env_rng = substream(cfg.seed, "env");
    let probes: Vec<State2> = (0..t.probe_states).map(|_| env2d::sample_initial(&mut env_rng, env)).collect();
    let eval_starts: Vec<State2> = (0..t.eval_episodes).map(|_| env2d::sample_initial(&mut env_rng, env)).collect();

    let mut agent_rng = substream(cfg.seed, "agent");
    let agent_oracle = (cfg.agent.mode == TargetMode::OraclePatch).then(|| Oracle {
        values: (*oracle).clone(),
        reach: reach.clone(),
    });
    let mut agent = Agent::new(cfg.agent.clone(), env, agent_oracle, &mut agent_rng)?;
    let mut rollout_rng = substream(cfg.seed, "rollouts");
    let mut buffer = ReplayBuffer::for_rollouts(t.rollouts_per_epoch, env.rollout_len, t.retain_epochs);

    let mut metrics = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(create(&dir.join("metrics.csv"))?);
    metrics.write_record(METRICS_HEADER)?;
    metrics.flush()?;
    let mut timing = csv::Writer::from_writer(create(&dir.join("timing.csv"))?);
    timing.write_record(["epoch", "seconds_per_update"])?;
    let mut traj = csv::Writer::from_writer(create(&dir.join("trajectories.csv"))?);
    traj.write_record(["epoch", "traj", "t", "x", "y"])?;

    let plan = EpochPlan {
        env,
        model: &model,
        penalty: cfg.model.penalty(),
        real: real.as_ref(),
        real_ratio: t.real_ratio,
        start_pool: None,
        rollouts: t.rollouts_per_epoch,
        updates: t.updates_per_epoch,
        probe_states: &probes,
        eval_starts: &eval_starts,
    };

    let mut records = Vec::with_capacity(t.epochs);
    let mut status = RunStatus::Ok;
    let mut message = None;
    let (mut model_reward, mut true_reward, mut steps) = (0.0, 0.0, 0usize);
    let (mut update_time, mut timed_epochs) = (0.0, 0usize);
    for epoch in 0..t.epochs {
        let outcome = match train_epoch(&mut agent, &plan, &mut buffer, epoch as u32, &mut rollout_rng, &mut agent_rng) {
            Ok(o) => o,
            Err(e) if is_non_finite(&e) => {
                status = RunStatus::NonFinite;
                message = Some(format!("epoch {epoch}: {e}"));
                break;
            }
            Err(e) => return Err(e.into()),
        };
        let n = outcome.rollouts.transitions.len();
        if n > 0 {
            model_reward += outcome.record.mean_model_reward * n as f64;
            true_reward += outcome.record.mean_true_reward * n as f64;
            steps += n;
        }
        if outcome.update_seconds.is_finite() {
            update_time += outcome.update_seconds;
            timed_epochs += 1;
        }
        metrics.serialize(&outcome.record)?;
        metrics.flush()?;
        timing.serialize((epoch, outcome.update_seconds))?;
        write_trajectories(&mut traj, &outcome.rollouts.transitions, t.saved_trajectories)?;
        if t.checkpoint_every > 0 && (epoch + 1) % t.checkpoint_every == 0 {
            agent.save(&dir.join("checkpoints").join(format!("epoch_{:05}", epoch + 1)))?;
        }
        records.push(outcome.record);
    }
    timing.flush()?;
    traj.flush()?;

    agent.save(&dir.join("checkpoints").join("final"))?;
    if t.dump_buffer && !buffer.is_empty() {
        buffer.write_csv(create(&dir.join("buffer.csv"))?)?;
    }
    oracle.write_csv(create(&dir.join("value_grid.csv"))?)?;

    let map_grid = GridSpec::new(reach.at(env.rollout_len).expand(1.0), cfg.analysis.map_h)?;
    let ensemble_std = if status == RunStatus::Ok && agent.q.len() >= 2 {
        let map = ensemble_variance_map(&agent.q, &agent.policy, &map_grid, &reach)?;
        map.write_csv(create(&dir.join("ensemble_std.csv"))?)?;
        write_policy_field(&dir.join("policy_field.csv"), &agent, &map_grid)?;
        write_eval_trajectories(&dir.join("eval_trajectories.csv"), &agent, env, &eval_starts)?;
        Some(map.summary())
    } else {
        None
    };

    let trace = QTrace::from_records(&records, oracle.max_value());
    let dp_optimal_return = oracle.optimal_return(env, &eval_starts);
    let final_eval_return = records.last().map_or(f64::NAN, |r| r.eval_return);
    let mean_or_nan = |v: f64| if steps > 0 { v / steps as f64 } else { f64::NAN };
    let summary = RunSummary {
        status,
        mode: cfg.agent.mode,
        seed: cfg.seed,
        epochs_completed: records.len(),
        final_eval_return,
        dp_optimal_return,
        return_fraction: final_eval_return / dp_optimal_return,
        oracle_max_value: oracle.max_value(),
        final_mean_q: records.last().map_or(f64::NAN, |r| r.mean_q),
        peak_mean_q: if records.is_empty() { f64::NAN } else { trace.peak() },
        tail_mean_q: if records.is_empty() { f64::NAN } else { trace.tail_mean(10) },
        divergence_epoch: trace.divergence_epoch(10.0),
        mean_model_reward: mean_or_nan(model_reward),
        mean_true_reward: mean_or_nan(true_reward),
        mean_update_seconds: if timed_epochs > 0 { update_time / timed_epochs as f64 } else { f64::NAN },
        ensemble_std,
        model_holdout_delta_mse: train_report.as_ref().map(|r| mean(&r.final_holdout_delta_mse)),
        model_holdout_reward_mse: train_report.as_ref().map(|r| mean(&r.final_holdout_reward_mse)),
        message,
    };
    std::fs::write(
        dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    Ok(summary)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn read_metrics(dir: &Path) -> Result<Vec<MetricsRecord>, HarnessError> {
    let path = dir.join("metrics.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(HarnessError::from)).collect()
}
