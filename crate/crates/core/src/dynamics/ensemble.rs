use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::DynamicsError;
use crate::approximator::{Adam, AdamConfig, EnsembleMlp};
use crate::env2d::{Action2, State2};
use crate::rollouts::Transition;
use crate::LabRng;

/// Model input is `(x, y, dx, dy)`; outputs are `(Δx, Δy, r)` means followed
/// by their log standard deviations.
pub const INPUT_DIM: usize = 4;
pub const TARGET_DIM: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnsembleTrainConfig {
    pub members: usize,
    pub elites: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    /// Floor on predicted log-std. Noiseless outputs sit at this floor, and
    /// their likelihood gradients scale as `exp(-2 * log_std_min)`, so a very
    /// low floor lets them drown out the reward output.
    pub log_std_min: f64,
    pub log_std_max: f64,
    /// Sample next states from the predicted Gaussian instead of using the mean.
    pub stochastic: bool,
}

impl Default for EnsembleTrainConfig {
    fn default() -> Self {
        Self {
            members: 7,
            elites: 5,
            hidden: vec![64, 64],
            epochs: 100,
            batch_size: 64,
            lr: 1e-3,
            holdout_fraction: 0.1,
            log_std_min: -3.0,
            log_std_max: 2.0,
            stochastic: false,
        }
    }
}

impl EnsembleTrainConfig {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.members < 2 {
            out.push("model.ensemble.members: need at least 2".into());
        }
        if self.elites == 0 || self.elites > self.members {
            out.push("model.ensemble.elites: must be in 1..=members".into());
        }
        if self.hidden.contains(&0) {
            out.push("model.ensemble.hidden: widths must be positive".into());
        }
        if self.batch_size == 0 {
            out.push("model.ensemble.batch_size: must be positive".into());
        }
        if !(self.lr > 0.0) {
            out.push("model.ensemble.lr: must be positive".into());
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            out.push("model.ensemble.holdout_fraction: must be in [0, 1)".into());
        }
        if !(self.log_std_min < self.log_std_max) {
            out.push("model.ensemble.log_std_min: must be below log_std_max".into());
        }
        out
    }
}

/// Deep ensemble of Gaussian next-state-delta and reward predictors.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianEnsemble {
    pub(crate) net: EnsembleMlp,
    pub(crate) elites: Vec<usize>,
    pub(crate) input_shift: [f64; INPUT_DIM],
    pub(crate) input_scale: [f64; INPUT_DIM],
    pub(crate) log_std_min: f64,
    pub(crate) log_std_max: f64,
    pub(crate) stochastic: bool,
    pub(crate) a_max: f64,
}

/// Per-member predictions for a batch.
#[derive(Debug, Clone)]
pub struct MemberPredictions {
    /// `[N, B, 3]` means of `(Δx, Δy, r)`.
    pub mean: Array3<f64>,
    /// `[N, B, 3]` standard deviations.
    pub std: Array3<f64>,
}

impl GaussianEnsemble {
    pub fn new(net: EnsembleMlp, a_max: f64, log_std_min: f64, log_std_max: f64) -> Result<Self, DynamicsError> {
        let w = net.widths();
        if net.len() < 2 || w[0] != INPUT_DIM || *w.last().unwrap() != 2 * TARGET_DIM {
            return Err(DynamicsError::InvalidEnsemble(format!(
                "need >= 2 members mapping {INPUT_DIM} -> {} (got {} members, widths {:?})",
                2 * TARGET_DIM,
                net.len(),
                w
            )));
        }
        let elites = (0..net.len()).collect();
        Ok(Self {
            net,
            elites,
            input_shift: [0.0; INPUT_DIM],
            input_scale: [1.0; INPUT_DIM],
            log_std_min,
            log_std_max,
            stochastic: false,
            a_max,
        })
    }

    pub fn members(&self) -> usize {
        self.net.len()
    }

    pub fn elites(&self) -> &[usize] {
        &self.elites
    }

    pub fn set_elites(&mut self, elites: Vec<usize>) {
        assert!(!elites.is_empty() && elites.iter().all(|&e| e < self.members()));
        self.elites = elites;
    }

    pub fn set_stochastic(&mut self, on: bool) {
        self.stochastic = on;
    }

    pub fn network(&self) -> &EnsembleMlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut EnsembleMlp {
        &mut self.net
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    fn encode(&self, states: &[State2], actions: &[Action2]) -> Array2<f64> {
        let mut x = Array2::zeros((states.len(), INPUT_DIM));
        for (i, (s, a)) in states.iter().zip(actions).enumerate() {
            let raw = [s.x, s.y, a.dx, a.dy];
            for j in 0..INPUT_DIM {
                x[[i, j]] = (raw[j] - self.input_shift[j]) / self.input_scale[j];
            }
        }
        x
    }

    pub(crate) fn encode_transitions(&self, data: &[Transition], idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let states: Vec<State2> = idx.iter().map(|&i| data[i].s).collect();
        let actions: Vec<Action2> = idx.iter().map(|&i| data[i].a).collect();
        let x = self.encode(&states, &actions);
        let mut y = Array2::zeros((idx.len(), TARGET_DIM));
        for (row, &i) in idx.iter().enumerate() {
            let t = &data[i];
            y[[row, 0]] = t.s_next.x - t.s.x;
            y[[row, 1]] = t.s_next.y - t.s.y;
            y[[row, 2]] = t.r;
        }
        (x, y)
    }

    fn split(&self, raw: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let mean = raw.slice(s![.., ..TARGET_DIM]).to_owned();
        let log_std = raw
            .slice(s![.., TARGET_DIM..])
            .mapv(|v| v.clamp(self.log_std_min, self.log_std_max));
        (mean, log_std)
    }

    pub fn member_predictions(&self, states: &[State2], actions: &[Action2]) -> Result<MemberPredictions, DynamicsError> {
        check_actions(actions, self.a_max)?;
        let x = self.encode(states, actions);
        let n = self.members();
        let b = states.len();
        let mut mean = Array3::zeros((n, b, TARGET_DIM));
        let mut std = Array3::zeros((n, b, TARGET_DIM));
        for i in 0..n {
            let raw = self.net.member(i).forward(x.view())?;
            let (m, ls) = self.split(raw.view());
            mean.index_axis_mut(Axis(0), i).assign(&m);
            std.index_axis_mut(Axis(0), i).assign(&ls.mapv(f64::exp));
        }
        Ok(MemberPredictions { mean, std })
    }

    /// One elite drawn uniformly per row; then, if stochastic, two standard
    /// normals for the state noise. This is the full rng draw order.
    pub fn predict_batch(
        &self,
        states: &[State2],
        actions: &[Action2],
        rng: &mut LabRng,
    ) -> Result<Vec<(State2, f64)>, DynamicsError> {
        let preds = self.member_predictions(states, actions)?;
        let mut out = Vec::with_capacity(states.len());
        for (row, s) in states.iter().enumerate() {
            let member = self.elites[rng.random_range(0..self.elites.len())];
            let m = preds.mean.slice(s![member, row, ..]);
            let mut dx = m[0];
            let mut dy = m[1];
            if self.stochastic {
                let sd = preds.std.slice(s![member, row, ..]);
                let nx: f64 = rng.sample(StandardNormal);
                let ny: f64 = rng.sample(StandardNormal);
                dx += sd[0] * nx;
                dy += sd[1] * ny;
            }
            out.push((State2::new(s.x + dx, s.y + dy), m[2]));
        }
        Ok(out)
    }
}

pub(crate) fn check_actions(actions: &[Action2], a_max: f64) -> Result<(), DynamicsError> {
    match actions.iter().find(|a| !a.within(a_max)) {
        Some(a) => Err(DynamicsError::ActionOutOfBounds { dx: a.dx, dy: a.dy, a_max }),
        None => Ok(()),
    }
}

/// Per-member fit diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub initial_holdout_nll: Vec<f64>,
    pub final_holdout_nll: Vec<f64>,
    /// Mean-prediction squared error on the state-delta outputs.
    pub final_holdout_delta_mse: Vec<f64>,
    pub final_holdout_reward_mse: Vec<f64>,
    pub elites: Vec<usize>,
    pub holdout_size: usize,
}

/// Gaussian negative log-likelihood per sample (without the constant), its
/// output cotangent, and the mean-prediction errors.
fn nll_and_grad(
    raw: &Array2<f64>,
    y: &Array2<f64>,
    log_std_min: f64,
    log_std_max: f64,
) -> (f64, Array2<f64>, f64, f64) {
    let b = raw.nrows();
    let mut dout = Array2::zeros(raw.dim());
    let mut nll = 0.0;
    let mut delta_se = 0.0;
    let mut reward_se = 0.0;
    for i in 0..b {
        for d in 0..TARGET_DIM {
            let mu = raw[[i, d]];
            let raw_ls = raw[[i, TARGET_DIM + d]];
            let ls = raw_ls.clamp(log_std_min, log_std_max);
            let inv_var = (-2.0 * ls).exp();
            let err = mu - y[[i, d]];
            nll += 0.5 * err * err * inv_var + ls;
            dout[[i, d]] = err * inv_var / b as f64;
            if (log_std_min..=log_std_max).contains(&raw_ls) {
                dout[[i, TARGET_DIM + d]] = (1.0 - err * err * inv_var) / b as f64;
            }
            if d < 2 {
                delta_se += err * err;
            } else {
                reward_se += err * err;
            }
        }
    }
    (nll / b as f64, dout, delta_se / b as f64, reward_se / b as f64)
}

fn evaluate_member(
    ens: &GaussianEnsemble,
    member: usize,
    x: &Array2<f64>,
    y: &Array2<f64>,
) -> Result<(f64, f64, f64), DynamicsError> {
    let raw = ens.net.member(member).forward(x.view())?;
    let (nll, _, dmse, rmse) = nll_and_grad(&raw, y, ens.log_std_min, ens.log_std_max);
    Ok((nll, dmse, rmse))
}

/// Maximum-likelihood training of every member on its own bootstrap resample,
/// with a shared held-out split used for elite selection.
pub fn train_ensemble(
    data: &[Transition],
    cfg: &EnsembleTrainConfig,
    a_max: f64,
    rng: &mut LabRng,
) -> Result<(GaussianEnsemble, TrainReport), DynamicsError> {
    if data.is_empty() {
        return Err(DynamicsError::EmptyDataset);
    }
    let problems = cfg.problems();
    if !problems.is_empty() {
        return Err(DynamicsError::InvalidEnsemble(problems.join("; ")));
    }
    let mut widths = vec![INPUT_DIM];
    widths.extend(&cfg.hidden);
    widths.push(2 * TARGET_DIM);
    let net = EnsembleMlp::new(cfg.members, &widths, rng);
    let mut ens = GaussianEnsemble::new(net, a_max, cfg.log_std_min, cfg.log_std_max)?;
    ens.stochastic = cfg.stochastic;

    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let n_hold = (data.len() as f64 * cfg.holdout_fraction).floor() as usize;
    let (hold_idx, train_idx) = if n_hold == 0 {
        (order.clone(), order.clone())
    } else {
        let (h, t) = order.split_at(n_hold);
        (h.to_vec(), t.to_vec())
    };

    // Input normalisation from the training split.
    for j in 0..INPUT_DIM {
        let vals: Vec<f64> = train_idx
            .iter()
            .map(|&i| {
                let t = &data[i];
                [t.s.x, t.s.y, t.a.dx, t.a.dy][j]
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
        ens.input_shift[j] = mean;
        ens.input_scale[j] = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    }

    let (hold_x, hold_y) = ens.encode_transitions(data, &hold_idx);
    let mut initial = Vec::new();
    for m in 0..cfg.members {
        initial.push(evaluate_member(&ens, m, &hold_x, &hold_y)?.0);
    }

    for member in 0..cfg.members {
        let mut member_rng = child_rng(rng, member as u64);
        let bootstrap: Vec<usize> = if train_idx.len() > 1 {
            (0..train_idx.len())
                .map(|_| train_idx[member_rng.random_range(0..train_idx.len())])
                .collect()
        } else {
            train_idx.clone()
        };
        fit_member(&mut ens, member, data, &bootstrap, cfg, &mut member_rng)?;
    }

    let mut final_nll = Vec::new();
    let mut dmse = Vec::new();
    let mut rmse = Vec::new();
    for m in 0..cfg.members {
        let (nll, d, r) = evaluate_member(&ens, m, &hold_x, &hold_y)?;
        final_nll.push(nll);
        dmse.push(d);
        rmse.push(r);
    }
    let mut ranked: Vec<usize> = (0..cfg.members).collect();
    ranked.sort_by(|&a, &b| final_nll[a].total_cmp(&final_nll[b]).then(a.cmp(&b)));
    let mut elites: Vec<usize> = ranked[..cfg.elites].to_vec();
    elites.sort_unstable();
    ens.elites = elites.clone();
    Ok((
        ens,
        TrainReport {
            initial_holdout_nll: initial,
            final_holdout_nll: final_nll,
            final_holdout_delta_mse: dmse,
            final_holdout_reward_mse: rmse,
            elites,
            holdout_size: hold_idx.len(),
        },
    ))
}

pub(crate) fn child_rng(parent: &mut LabRng, stream: u64) -> LabRng {
    use rand::SeedableRng;
    let mut child = LabRng::seed_from_u64(parent.random());
    child.set_stream(stream);
    child
}

/// Minibatch Adam on one member's NLL. The rng only drives the epoch shuffles,
/// so equal initial parameters, data and rng state give equal results.
pub fn fit_member(
    ens: &mut GaussianEnsemble,
    member: usize,
    data: &[Transition],
    indices: &[usize],
    cfg: &EnsembleTrainConfig,
    rng: &mut LabRng,
) -> Result<(), DynamicsError> {
    let mut net = ens.net.member_mlp(member);
    let mut opt = Adam::new(&net, AdamConfig::with_lr(cfg.lr));
    let mut order = indices.to_vec();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = ens.encode_transitions(data, chunk);
            let tape = net.forward_tape(x.view())?;
            let (nll, dout, _, _) = nll_and_grad(tape.output(), &y, cfg.log_std_min, cfg.log_std_max);
            if !nll.is_finite() {
                return Err(DynamicsError::NonFiniteLoss {
                    member,
                    epoch,
                    detail: format!("batch of {} samples, nll {nll}", chunk.len()),
                });
            }
            let (grads, _) = net.backward(&tape, dout.view())?;
            opt.step(&mut net, &grads)?;
        }
    }
    ens.net.set_member(member, &net);
    Ok(())
}

/// Summed mean NLL over the given transitions, per member.
pub fn holdout_nll(ens: &GaussianEnsemble, data: &[Transition]) -> Result<Array1<f64>, DynamicsError> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = ens.encode_transitions(data, &idx);
    let mut out = Array1::zeros(ens.members());
    for m in 0..ens.members() {
        out[m] = evaluate_member(ens, m, &x, &y)?.0;
    }
    Ok(out)
}

/// Re-exposed for the dynamics gradient checks.
pub fn nll_loss(ens: &GaussianEnsemble, member_net: &crate::approximator::Mlp, data: &[Transition]) -> (f64, Array2<f64>, Array2<f64>) {
    let idx: Vec<usize> = (0..data.len()).collect();
    let (x, y) = ens.encode_transitions(data, &idx);
    let raw = member_net.forward(x.view()).expect("width checked by caller");
    let (nll, dout, _, _) = nll_and_grad(&raw, &y, ens.log_std_min, ens.log_std_max);
    (nll, dout, x)
}
