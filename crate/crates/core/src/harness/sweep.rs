use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::run::{oracle_for, run, RunSummary};
use super::HarnessError;
use crate::agent::{Agent, Batch, Oracle, Policy, TargetMode};
use crate::dynamics::DynamicsModel;
use crate::env2d::{self, reach_boxes};
use crate::rollouts::{collect_rollouts, ReplayBuffer};
use crate::substream;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepPoint {
    pub axis: String,
    pub value: String,
    pub output_dir: PathBuf,
    pub summary: RunSummary,
}

fn axis_exists(cfg: &ExperimentConfig, axis: &str) -> bool {
    let table: toml::Table = cfg.to_toml().parse().expect("serialized config parses");
    let mut cur = &toml::Value::Table(table);
    for key in axis.split('.') {
        match cur.as_table().and_then(|t| t.get(key)) {
            Some(v) => cur = v,
            None => return false,
        }
    }
    !cur.is_table()
}

fn dir_name(axis: &str, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' })
        .collect();
    format!("{axis}={clean}")
}

/// One independent run per value of `axis`, each in its own subdirectory of
/// the base output directory, executed in parallel. Writes a merged
/// `sweep_summary.csv` and `sweep.json` next to the point directories.
pub fn sweep(base: &ExperimentConfig, axis: &str, values: &[String]) -> Result<Vec<SweepPoint>, HarnessError> {
    if !axis_exists(base, axis) {
        return Err(HarnessError::InvalidAxis {
            axis: axis.to_string(),
            reason: "no such config field".into(),
        });
    }
    if values.is_empty() {
        return Err(HarnessError::InvalidAxis {
            axis: axis.to_string(),
            reason: "no values given".into(),
        });
    }
    let mut configs = Vec::with_capacity(values.len());
    for v in values {
        let mut cfg = base
            .with_overrides(&[format!("{axis}={v}")])
            .map_err(|e| HarnessError::InvalidAxis {
                axis: axis.to_string(),
                reason: format!("value `{v}`: {e}"),
            })?;
        cfg.output_dir = base.output_dir.join(dir_name(axis, v));
        cfg.validate()?;
        configs.push((v.clone(), cfg));
    }
    let results: Vec<Result<SweepPoint, HarnessError>> = configs
        .into_par_iter()
        .map(|(value, cfg)| {
            let summary = run(&cfg)?;
            Ok(SweepPoint {
                axis: axis.to_string(),
                value,
                output_dir: cfg.output_dir,
                summary,
            })
        })
        .collect();
    let points = results.into_iter().collect::<Result<Vec<_>, _>>()?;

    std::fs::create_dir_all(&base.output_dir)?;
    let mut w = csv::Writer::from_path(base.output_dir.join("sweep_summary.csv"))?;
    w.write_record([
        "axis",
        "value",
        "status",
        "final_eval_return",
        "dp_optimal_return",
        "return_fraction",
        "tail_mean_q",
        "peak_mean_q",
        "divergence_epoch",
        "mean_std_edge",
        "mean_std_within",
    ])?;
    for p in &points {
        let s = &p.summary;
        let std = s.ensemble_std;
        w.write_record([
            p.axis.clone(),
            p.value.clone(),
            serde_json::to_value(s.status).unwrap().as_str().unwrap_or_default().to_string(),
            s.final_eval_return.to_string(),
            s.dp_optimal_return.to_string(),
            s.return_fraction.to_string(),
            s.tail_mean_q.to_string(),
            s.peak_mean_q.to_string(),
            s.divergence_epoch.map(|e| e.to_string()).unwrap_or_default(),
            std.map(|v| v.mean_std_edge.to_string()).unwrap_or_default(),
            std.map(|v| v.mean_std_within.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    std::fs::write(
        base.output_dir.join("sweep.json"),
        serde_json::to_string_pretty(&points).expect("points serialize"),
    )?;
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimingRow {
    pub n_critics: usize,
    pub median_seconds: f64,
    /// Median per-update time relative to two critics.
    pub ratio: f64,
}

/// Median wall-clock per agent update for each critic count, normalised to
/// the two-critic time. Each repeat times `updates` consecutive updates on
/// batches from a fixed buffer of true-dynamics rollouts.
pub fn timing_bench(
    cfg: &ExperimentConfig,
    n_values: &[usize],
    updates: usize,
    repeats: usize,
) -> Result<Vec<TimingRow>, HarnessError> {
    if n_values.iter().any(|&n| n < 2) {
        return Err(HarnessError::InvalidConfig(vec!["n_critics: every value must be >= 2".into()]));
    }
    if updates == 0 || repeats == 0 {
        return Err(HarnessError::InvalidConfig(vec!["updates and repeats must be positive".into()]));
    }
    cfg.validate()?;
    let env = &cfg.env;
    let mut rng = substream(cfg.seed, "rollouts");
    let model = DynamicsModel::True {
        field: env.reward.clone(),
        a_max: env.a_max,
    };
    let policy = Policy::new(&cfg.agent.hidden, env.a_max, &mut rng);
    let starts: Vec<_> = (0..256).map(|_| env2d::sample_initial(&mut rng, env)).collect();
    let batch = collect_rollouts(&model, None, &policy, &starts, env.rollout_len, 256, 0, &mut rng)?;
    let buffer = ReplayBuffer::from_transitions(batch.transitions);
    let oracle = if cfg.agent.mode == TargetMode::OraclePatch {
        Some(Oracle {
            values: (*oracle_for(env, &cfg.analysis.dp)?).clone(),
            reach: reach_boxes(env),
        })
    } else {
        None
    };

    let mut ns = vec![2];
    ns.extend(n_values.iter().copied().filter(|&n| n != 2));
    let mut medians = Vec::with_capacity(ns.len());
    for &n in &ns {
        let mut agent_cfg = cfg.agent.clone();
        agent_cfg.n_critics = n;
        let mut agent_rng = substream(cfg.seed, "agent");
        let mut agent = Agent::new(agent_cfg, env, oracle.clone(), &mut agent_rng)?;
        let mut sampled = Vec::new();
        let mut next_batch = |rng: &mut crate::LabRng| {
            sampled.clear();
            buffer.sample(cfg.agent.batch_size, rng, &mut sampled);
            Batch::from_transitions(&sampled)
        };
        for _ in 0..2 {
            let b = next_batch(&mut agent_rng);
            agent.update(&b, &mut agent_rng)?;
        }
        let mut times = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let batches: Vec<Batch> = (0..updates).map(|_| next_batch(&mut agent_rng)).collect();
            let start = Instant::now();
            for b in &batches {
                agent.update(b, &mut agent_rng)?;
            }
            times.push(start.elapsed().as_secs_f64() / updates as f64);
        }
        times.sort_by(f64::total_cmp);
        medians.push((n, times[times.len() / 2]));
    }
    let base = medians[0].1;
    Ok(ns
        .iter()
        .zip(&medians)
        .filter(|(n, _)| n_values.contains(n))
        .map(|(&n, &(_, m))| TimingRow {
            n_critics: n,
            median_seconds: m,
            ratio: m / base,
        })
        .collect())
}
