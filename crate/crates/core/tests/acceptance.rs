//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails.
//!
//! The long training criteria stop as soon as their seed-count outcome is
//! decided. Set `EDGEREACH_ACCEPTANCE_ONLY=1,5,7` to run a subset.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use edgereach::agent::{actor_loss_and_grads, critic_loss_and_grads, state_action_matrix, MinOver};
use edgereach::analysis::{condition_audit, propagate_error_check, TabularMdp, TabularRollout};
use edgereach::approximator::{EnsembleMlp, Head, Mlp, Parameters};
use edgereach::dynamics::{nll_loss, penalty, uniform_action, INPUT_DIM, TARGET_DIM};
use edgereach::harness::{self, ModelVariant, RunStatus, RunSummary};
use edgereach::rollouts::{collect_rollouts, ConstantAction};
use edgereach::{
    substream, Action2, DynamicsModel, ExperimentConfig, GaussianEnsemble, LabRng, PenaltyKind, Policy, QEnsemble,
    ReplayBuffer, RewardField, State2, TargetMode, Transition,
};
use rand::Rng;

const SEEDS: [u64; 4] = [0, 1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn out_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn toy_config(name: &str, seed: u64) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.seed = seed;
    c.output_dir = out_root().join(format!("{name}-seed{seed}"));
    c
}

fn run_or_report(cfg: &ExperimentConfig) -> Result<RunSummary, String> {
    harness::run(cfg).map_err(|e| format!("{}: {e}", cfg.output_dir.display()))
}

/// Runs seeds in order until `needed` passes are reached or can no longer
/// be reached. Returns (passes, lines).
fn seed_vote(
    needed: usize,
    make: impl Fn(u64) -> ExperimentConfig,
    judge: impl Fn(&RunSummary) -> (bool, String),
) -> Result<(usize, Vec<String>, Vec<RunSummary>), String> {
    let mut passes = 0;
    let mut lines = Vec::new();
    let mut summaries = Vec::new();
    for (i, &seed) in SEEDS.iter().enumerate() {
        let remaining = SEEDS.len() - i;
        if passes >= needed || passes + remaining < needed {
            break;
        }
        let started = Instant::now();
        let s = run_or_report(&make(seed))?;
        let (ok, why) = judge(&s);
        passes += ok as usize;
        lines.push(format!(
            "seed {seed}: {} {why} ({:.0}s)",
            if ok { "ok" } else { "no" },
            started.elapsed().as_secs_f64()
        ));
        summaries.push(s);
    }
    Ok((passes, lines, summaries))
}

fn base_failure() -> Result<Outcome, String> {
    let (passes, lines, _) = seed_vote(
        3,
        |seed| {
            let mut c = toy_config("base", seed);
            c.training.epochs = 400;
            c
        },
        |s| {
            let exploded = s.peak_mean_q > 10.0 * s.oracle_max_value;
            let collapsed = s.final_eval_return < 0.5 * s.dp_optimal_return;
            (
                exploded && collapsed,
                format!(
                    "peak mean Q {:.1} vs 10x max V* {:.1}, final return {:.2} vs half optimum {:.2}",
                    s.peak_mean_q,
                    10.0 * s.oracle_max_value,
                    s.final_eval_return,
                    0.5 * s.dp_optimal_return
                ),
            )
        },
    )?;
    Ok(outcome(passes >= 3, format!("{passes} seeds diverged; {}", lines.join("; "))))
}

fn fixed_and_bounded(s: &RunSummary) -> (bool, String) {
    let q_ok = s.tail_mean_q >= 0.0 && s.tail_mean_q <= 2.0 * s.oracle_max_value;
    let ok = s.status == RunStatus::Ok && s.return_fraction >= 0.9 && q_ok;
    (
        ok,
        format!(
            "return {:.1}% of optimum, tail mean Q {:.1} (bound {:.1})",
            100.0 * s.return_fraction,
            s.tail_mean_q,
            2.0 * s.oracle_max_value
        ),
    )
}

fn oracle_patch_fix() -> Result<Outcome, String> {
    let (passes, lines, _) = seed_vote(
        4,
        |seed| {
            let mut c = toy_config("oracle-patch", seed);
            c.agent.mode = TargetMode::OraclePatch;
            c.training.epochs = 100;
            c
        },
        fixed_and_bounded,
    )?;
    Ok(outcome(passes == 4, lines.join("; ")))
}

fn ravl_config(seed: u64, eta: f64) -> ExperimentConfig {
    let mut c = toy_config(&format!("ravl-eta{eta}"), seed);
    c.agent.mode = TargetMode::Ravl;
    c.agent.n_critics = 10;
    c.agent.eta = eta;
    c.training.epochs = 100;
    c
}

/// Returns the criterion outcome and one summary from the passing setting
/// (or the last one tried) for the variance check.
fn ravl_fix() -> Result<(Outcome, Option<RunSummary>), String> {
    let mut report = Vec::new();
    let mut last = None;
    for eta in [1.0, 10.0, 100.0] {
        let (passes, lines, summaries) = seed_vote(3, |seed| ravl_config(seed, eta), fixed_and_bounded)?;
        report.push(format!("eta {eta}: {}", lines.join(", ")));
        last = summaries.into_iter().next().or(last);
        if passes >= 3 {
            return Ok((outcome(true, report.join("; ")), last));
        }
    }
    Ok((outcome(false, report.join("; ")), last))
}

fn edge_variance(ravl: Option<RunSummary>) -> Result<Outcome, String> {
    let s = match ravl {
        Some(s) => s,
        None => run_or_report(&ravl_config(0, 1.0))?,
    };
    let Some(v) = s.ensemble_std else {
        return Ok(outcome(false, "run produced no ensemble spread map"));
    };
    let ratio = v.mean_std_edge / v.mean_std_within;
    Ok(outcome(
        ratio >= 2.0,
        format!(
            "edge std {:.4} over {} cells, within std {:.4} over {} cells, ratio {ratio:.2}",
            v.mean_std_edge, v.edge_cells, v.mean_std_within, v.within_cells
        ),
    ))
}

fn random_state(rng: &mut LabRng, half: f64) -> State2 {
    State2::new(rng.random_range(-half..half), rng.random_range(-half..half))
}

fn penalty_collapse() -> Result<Outcome, String> {
    let mut rng = substream(5, "acceptance");
    let mut failures = Vec::new();
    for kind in [PenaltyKind::Mopo, PenaltyKind::Morel, PenaltyKind::Mobile] {
        let mut worst = 0.0f64;
        // Ten independent identical ensembles, one hundred probes each.
        for _ in 0..10 {
            let mut net = EnsembleMlp::new(5, &[INPUT_DIM, 16, 16, 2 * TARGET_DIM], &mut rng);
            net.tie_to_member(0);
            let ens = GaussianEnsemble::new(net, 1.0, -10.0, 2.0).map_err(|e| e.to_string())?;
            for _ in 0..100 {
                let s = random_state(&mut rng, 12.0);
                let a = uniform_action(&mut rng, 1.0);
                worst = worst.max(penalty(kind, &ens, s, a).map_err(|e| e.to_string())?.abs());
            }
        }
        if worst != 0.0 {
            failures.push(format!("{kind:?} max |penalty| {worst:.3e}"));
        }
    }
    Ok(if failures.is_empty() {
        outcome(true, "all kinds exactly 0 on 1000 probes")
    } else {
        outcome(false, failures.join(", "))
    })
}

fn propagation() -> Result<Outcome, String> {
    let mut rng = substream(6, "acceptance");
    let mut worst_exact = 0.0f64;
    for _ in 0..50 {
        let n = rng.random_range(12..40);
        let k = rng.random_range(2..12);
        let gamma = rng.random_range(0.5..0.999);
        let eps = rng.random_range(-5.0..5.0);
        let mdp = TabularMdp::random(n, 3, gamma, &mut rng);
        let Some(roll) = TabularRollout::random(&mdp, k, &mut rng) else {
            continue;
        };
        let rep = propagate_error_check(&mdp, &roll, eps, 0.0, 4 * k, &mut rng).map_err(|e| e.to_string())?;
        for step in rep.steps.iter().filter(|s| s.t >= 1) {
            let expected = gamma.powi((k - step.t) as i32) * eps;
            worst_exact = worst_exact.max((step.measured - expected).abs());
        }
    }
    let mut violations = 0;
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(8..30);
        let k = rng.random_range(1..10);
        let gamma = rng.random_range(0.0..0.999);
        let mdp = TabularMdp::random(n, rng.random_range(2..4), gamma, &mut rng);
        let Some(roll) = TabularRollout::random(&mdp, k, &mut rng) else {
            continue;
        };
        let eps = rng.random_range(-10.0..10.0);
        let delta = rng.random_range(0.0..2.0);
        let rep = propagate_error_check(&mdp, &roll, eps, delta, 2 * k + 5, &mut rng).map_err(|e| e.to_string())?;
        violations += rep.violations;
        checked += 1;
    }
    Ok(outcome(
        worst_exact <= 1e-9 && violations == 0,
        format!("max |measured - gamma^(k-t) eps| {worst_exact:.2e}; {violations} bound violations on {checked} MDPs"),
    ))
}

fn interpolation() -> Result<Outcome, String> {
    let mut rng = substream(7, "acceptance");
    let net = EnsembleMlp::new(4, &[INPUT_DIM, 16, 2 * TARGET_DIM], &mut rng);
    let mut ens = GaussianEnsemble::new(net, 1.0, -10.0, 2.0).map_err(|e| e.to_string())?;
    ens.set_stochastic(true);
    let learned = DynamicsModel::Learned(ens);
    let truth = DynamicsModel::True {
        field: RewardField::default(),
        a_max: 1.0,
    };
    let states: Vec<State2> = (0..500).map(|_| random_state(&mut rng, 12.0)).collect();
    let actions: Vec<Action2> = (0..500).map(|_| uniform_action(&mut rng, 1.0)).collect();
    let predict = |m: &DynamicsModel, r: &LabRng| m.predict_batch(&states, &actions, &mut r.clone()).unwrap();
    let shared = substream(7, "shared");
    let base = predict(&learned, &shared);
    let target = predict(&truth, &shared);
    let at = |alpha| {
        let m = DynamicsModel::interpolated(learned.clone(), truth.clone(), alpha).unwrap();
        predict(&m, &shared)
    };
    let bits = |v: &[(State2, f64)]| -> Vec<u64> {
        v.iter()
            .flat_map(|(s, r)| [s.x.to_bits(), s.y.to_bits(), r.to_bits()])
            .collect()
    };
    let zero_ok = bits(&at(0.0)) == bits(&base);
    let one_ok = bits(&at(1.0)) == bits(&target);
    let half = at(0.5);
    let mut worst = 0.0f64;
    for ((m, b), t) in half.iter().zip(&base).zip(&target) {
        for (x, (y, z)) in [(m.0.x, (b.0.x, t.0.x)), (m.0.y, (b.0.y, t.0.y)), (m.1, (b.1, t.1))] {
            worst = worst.max((x - (y + z) / 2.0).abs());
        }
    }
    Ok(outcome(
        zero_ok && one_ok && worst <= 1e-12,
        format!("alpha 0 bit-identical {zero_ok}, alpha 1 bit-identical {one_ok}, midpoint error {worst:.2e}"),
    ))
}

fn perturbed<P: Parameters + Clone>(p: &P, mut idx: usize, delta: f64) -> P {
    let mut out = p.clone();
    for block in out.param_blocks_mut() {
        if idx < block.data.len() {
            block.data[idx] += delta;
            break;
        }
        idx -= block.data.len();
    }
    out
}

/// Central differences against the analytic gradient on `probes` random
/// coordinates. Returns the number of mismatches and the worst relative error.
fn fd_check<P: Parameters + Clone>(
    params: &P,
    analytic: &[f64],
    loss: impl Fn(&P) -> f64,
    probes: usize,
    rng: &mut LabRng,
) -> (usize, f64) {
    let h = 1e-6;
    let mut bad = 0;
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let idx = rng.random_range(0..analytic.len());
        let fd = (loss(&perturbed(params, idx, h)) - loss(&perturbed(params, idx, -h))) / (2.0 * h);
        let an = analytic[idx];
        let scale = fd.abs().max(an.abs());
        // Absolute floor for coordinates behind inactive ReLUs.
        if (fd - an).abs() > 1e-4 * scale + 1e-9 {
            bad += 1;
        }
        if scale > 1e-9 {
            worst = worst.max((fd - an).abs() / scale);
        }
    }
    (bad, worst)
}

fn gradients() -> Result<Outcome, String> {
    let mut rng = substream(8, "acceptance");
    let b = 12;
    let states = ndarray::Array2::from_shape_fn((b, 2), |_| rng.random_range(-8.0..8.0));
    let actions = ndarray::Array2::from_shape_fn((b, 2), |_| rng.random_range(-1.0..1.0));
    let targets = ndarray::Array1::from_shape_fn(b, |_| rng.random_range(-5.0..50.0));
    let mut parts = Vec::new();
    let mut total_bad = 0;

    let q = QEnsemble::new(4, &[10, 8], &mut rng).map_err(|e| e.to_string())?;
    let sa = state_action_matrix(states.view(), actions.view());
    for eta in [0.0, 5.0] {
        let (_, grads) = critic_loss_and_grads(q.online(), sa.view(), targets.view(), eta).map_err(|e| e.to_string())?;
        let loss = |net: &EnsembleMlp| critic_loss_and_grads(net, sa.view(), targets.view(), eta).unwrap().0.loss;
        let (bad, worst) = fd_check(q.online(), &grads.flat_params(), loss, 100, &mut rng);
        total_bad += bad;
        parts.push(format!("critic eta {eta}: {bad}/100 off, worst {worst:.1e}"));
    }

    let policy = Policy::new(&[10, 8], 1.0, &mut rng);
    let eps = policy.draw_noise(b, &mut rng);
    let critic = MinOver { net: q.online(), set: 4 };
    let (_, grads, _) =
        actor_loss_and_grads(&policy, &critic, states.view(), eps.clone(), 0.3).map_err(|e| e.to_string())?;
    let loss = |p: &Policy| {
        actor_loss_and_grads(p, &critic, states.view(), eps.clone(), 0.3)
            .unwrap()
            .0
            .loss
    };
    let (bad, worst) = fd_check(&policy, &grads.flat_params(), loss, 100, &mut rng);
    total_bad += bad;
    parts.push(format!("actor: {bad}/100 off, worst {worst:.1e}"));

    let data: Vec<Transition> = (0..24)
        .map(|i| {
            let s = random_state(&mut rng, 10.0);
            let a = uniform_action(&mut rng, 1.0);
            Transition {
                epoch: 0,
                traj: i,
                step_index: 0,
                s,
                a,
                r: rng.random_range(0.0..1.0),
                s_next: State2::new(s.x + a.dx, s.y + a.dy),
                done: false,
            }
        })
        .collect();
    let ens = GaussianEnsemble::new(
        EnsembleMlp::new(2, &[INPUT_DIM, 12, 2 * TARGET_DIM], &mut rng),
        1.0,
        -10.0,
        2.0,
    )
    .map_err(|e| e.to_string())?;
    let member = Mlp::new(&[INPUT_DIM, 12, 10, 2 * TARGET_DIM], Head::Identity, &mut rng);
    let (_, dout, x) = nll_loss(&ens, &member, &data);
    let tape = member.forward_tape(x.view()).map_err(|e| e.to_string())?;
    let (grads, _) = member.backward(&tape, dout.view()).map_err(|e| e.to_string())?;
    let loss = |m: &Mlp| nll_loss(&ens, m, &data).0;
    let (bad, worst) = fd_check(&member, &grads.flat_params(), loss, 100, &mut rng);
    total_bad += bad;
    parts.push(format!("dynamics: {bad}/100 off, worst {worst:.1e}"));

    Ok(outcome(total_bad == 0, parts.join("; ")))
}

fn model_reward() -> Result<Outcome, String> {
    let mut lines = Vec::new();
    let mut all = true;
    for seed in [0u64, 1] {
        let mut c = toy_config("learned-base", seed);
        c.model.variant = ModelVariant::Learned;
        c.training.epochs = 40;
        let s = run_or_report(&c)?;
        let rel = (s.mean_model_reward - s.mean_true_reward).abs() / s.mean_true_reward.abs();
        let ok = rel <= 0.5;
        all &= ok;
        lines.push(format!(
            "seed {seed}: model {:.4} vs true {:.4} per step ({:.1}% off)",
            s.mean_model_reward,
            s.mean_true_reward,
            100.0 * rel
        ));
    }
    Ok(outcome(all, lines.join("; ")))
}

fn timing() -> Result<Outcome, String> {
    let mut c = toy_config("timing", 0);
    c.training.epochs = 0;
    let rows = harness::timing_bench(&c, &[2, 100], 10, 5).map_err(|e| e.to_string())?;
    let ratio = rows[1].ratio;
    Ok(outcome(
        ratio <= 1.25,
        format!(
            "N=2 {:.2} ms, N=100 {:.2} ms per update, ratio {ratio:.2} on {} thread(s)",
            1e3 * rows[0].median_seconds,
            1e3 * rows[1].median_seconds,
            std::thread::available_parallelism().map_or(1, |n| n.get())
        ),
    ))
}

fn determinism() -> Result<Outcome, String> {
    let make = |name: &str| {
        let mut c = toy_config(name, 11);
        c.agent.mode = TargetMode::Ravl;
        c.agent.n_critics = 5;
        c.agent.eta = 1.0;
        c.training.epochs = 5;
        c.training.rollouts_per_epoch = 200;
        c.training.updates_per_epoch = 20;
        c
    };
    let a = make("determinism-a");
    let b = make("determinism-b");
    run_or_report(&a)?;
    run_or_report(&b)?;
    let read = |c: &ExperimentConfig| std::fs::read(c.output_dir.join("metrics.csv")).map_err(|e| e.to_string());
    let (ma, mb) = (read(&a)?, read(&b)?);
    Ok(outcome(
        ma == mb && !ma.is_empty(),
        format!("{} vs {} bytes, identical {}", ma.len(), mb.len(), ma == mb),
    ))
}

fn dataset_audit() -> Result<Outcome, String> {
    let mut rng = substream(12, "acceptance");
    let k = 10;
    let starts: Vec<State2> = (0..200).map(|_| random_state(&mut rng, 2.0)).collect();
    let model = DynamicsModel::True {
        field: RewardField::default(),
        a_max: 1.0,
    };
    let policy = ConstantAction(Action2::new(0.73, -0.41));
    let batch = collect_rollouts(&model, None, &policy, &starts, k, 200, 0, &mut rng).map_err(|e| e.to_string())?;
    let buf = ReplayBuffer::from_transitions(batch.transitions);
    let report = condition_audit(&buf, 0.0, None, &mut rng).map_err(|e| e.to_string())?;
    let expected: Vec<usize> = buf
        .iter()
        .enumerate()
        .filter(|(_, t)| t.step_index as usize == k - 1)
        .map(|(i, _)| i)
        .collect();
    Ok(outcome(
        report.flagged == expected,
        format!(
            "{} flagged, {} final-step transitions, sets equal {}",
            report.flagged.len(),
            expected.len(),
            report.flagged == expected
        ),
    ))
}

fn main() -> ExitCode {
    let only: Option<Vec<usize>> = std::env::var("EDGEREACH_ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().is_none_or(|o| o.contains(&i));
    let _ = std::fs::create_dir_all(out_root());

    let mut ravl_summary = None;
    let mut results: Vec<(usize, &str, Result<Outcome, String>)> = Vec::new();
    let mut record = |i: usize, name: &'static str, f: &mut dyn FnMut() -> Result<Outcome, String>| {
        if wanted(i) {
            let started = Instant::now();
            let r = f();
            let line = match &r {
                Ok(o) => format!("{} [{i:>2}] {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail),
                Err(e) => format!("FAIL [{i:>2}] {name}: error: {e}"),
            };
            println!("{line} ({:.1}s)", started.elapsed().as_secs_f64());
            results.push((i, name, r));
        }
    };

    record(5, "penalties vanish for identical ensembles", &mut penalty_collapse);
    record(6, "error propagation exactness and bound", &mut propagation);
    record(7, "interpolation endpoints and midpoint", &mut interpolation);
    record(8, "finite-difference gradient checks", &mut gradients);
    record(11, "byte-identical metrics for a repeated run", &mut determinism);
    record(12, "audit flags exactly the final-step next states", &mut dataset_audit);
    record(10, "N=100 update time within 1.25x of N=2", &mut timing);
    record(9, "learned-model reward tracks the true reward", &mut model_reward);
    record(2, "oracle patch recovers the optimum", &mut oracle_patch_fix);
    record(3, "RAVL recovers the optimum", &mut || {
        let (o, s) = ravl_fix()?;
        ravl_summary = s;
        Ok(o)
    });
    record(4, "ensemble spread is higher at edge-of-reach states", &mut || {
        edge_variance(ravl_summary.take())
    });
    record(1, "base procedure diverges on the true dynamics", &mut base_failure);

    let failed = results
        .iter()
        .filter(|(_, _, r)| !matches!(r, Ok(o) if o.pass))
        .count();
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
