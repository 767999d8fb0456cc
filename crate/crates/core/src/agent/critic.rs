use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::policy::Policy;
use super::{AgentError, Batch};
use crate::analysis::ValueGrid;
use crate::approximator::{polyak_update, EnsembleMlp, Parameters};
use crate::env2d::{ReachSpec, State2};
use crate::LabRng;

/// Which critics form the Bellman-target minimum, and whether edge-of-reach
/// next states get oracle values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    /// Clipped double-Q: minimum over the first two target critics.
    Base,
    /// Minimum over every target critic.
    Ravl,
    /// As `Base`, but edge-of-reach next states bootstrap from the oracle.
    OraclePatch,
}

impl TargetMode {
    pub fn min_set(self, n_critics: usize) -> usize {
        match self {
            TargetMode::Base | TargetMode::OraclePatch => n_critics.min(2),
            TargetMode::Ravl => n_critics,
        }
    }
}

/// Ground-truth values plus the reach geometry that decides where they apply.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub values: ValueGrid,
    pub reach: ReachSpec,
}

/// `N` online critics `Q(s, a)` with Polyak-averaged target copies.
#[derive(Debug, Clone, PartialEq)]
pub struct QEnsemble {
    pub(crate) online: EnsembleMlp,
    pub(crate) target: EnsembleMlp,
}

pub fn state_action_matrix(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Array2<f64> {
    concatenate(Axis(1), &[states, actions]).expect("equal batch sizes")
}

impl QEnsemble {
    pub fn new(n: usize, hidden: &[usize], rng: &mut LabRng) -> Result<Self, AgentError> {
        if n < 2 {
            return Err(AgentError::Config(format!("agent.n_critics: need at least 2, got {n}")));
        }
        let mut widths = vec![4];
        widths.extend(hidden);
        widths.push(1);
        let online = EnsembleMlp::new(n, &widths, rng);
        Ok(Self {
            target: online.clone(),
            online,
        })
    }

    pub fn from_online(online: EnsembleMlp) -> Result<Self, AgentError> {
        let w = online.widths();
        if online.len() < 2 || w[0] != 4 || online.out_dim() != 1 {
            return Err(AgentError::Shape(format!(
                "critic ensemble must hold >= 2 members mapping 4 -> 1, got {} members with widths {:?}",
                online.len(),
                w
            )));
        }
        Ok(Self {
            target: online.clone(),
            online,
        })
    }

    pub fn len(&self) -> usize {
        self.online.len()
    }

    pub fn is_empty(&self) -> bool {
        self.online.is_empty()
    }

    pub fn online(&self) -> &EnsembleMlp {
        &self.online
    }

    pub fn online_mut(&mut self) -> &mut EnsembleMlp {
        &mut self.online
    }

    pub fn target(&self) -> &EnsembleMlp {
        &self.target
    }

    /// `[N, B]` online values.
    pub fn values(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>, AgentError> {
        ensemble_values(&self.online, states, actions)
    }

    /// `[N, B]` target-network values.
    pub fn target_values(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>, AgentError> {
        ensemble_values(&self.target, states, actions)
    }

    pub fn soft_update(&mut self, tau: f64) {
        polyak_update(&mut self.target, &self.online, tau);
    }
}

fn ensemble_values(net: &EnsembleMlp, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>, AgentError> {
    let sa = state_action_matrix(states, actions);
    let out = net.forward(sa.view())?;
    Ok(out.index_axis_move(Axis(2), 0))
}

/// Index-ordered first minimum over the leading `set` rows of column `b`.
pub(crate) fn argmin_first(values: &ArrayView2<f64>, set: usize, b: usize) -> usize {
    let mut best = 0;
    for i in 1..set {
        if values[[i, b]] < values[[best, b]] {
            best = i;
        }
    }
    best
}

/// Soft Bellman targets from precomputed next-state critic values `[N, B]`:
/// `r + gamma * (1 - done) * (min_{i < set} q_i - alpha * log_prob)`.
pub fn soft_targets(
    rewards: ArrayView1<f64>,
    dones: ArrayView1<f64>,
    next_q: ArrayView2<f64>,
    set: usize,
    next_log_prob: ArrayView1<f64>,
    alpha: f64,
    gamma: f64,
) -> Array1<f64> {
    Array1::from_shape_fn(rewards.len(), |b| {
        let q = next_q[[argmin_first(&next_q, set, b), b]];
        rewards[b] + gamma * (1.0 - dones[b]) * (q - alpha * next_log_prob[b])
    })
}

#[derive(Debug, Clone)]
pub struct TargetReport {
    pub targets: Array1<f64>,
    /// Samples whose target came from the oracle.
    pub patched: usize,
}

/// Targets for a batch. The next action is sampled for every sample, patched
/// or not, so the draw sequence does not depend on the mode.
#[allow(clippy::too_many_arguments)]
pub fn bellman_targets(
    batch: &Batch,
    mode: TargetMode,
    q: &QEnsemble,
    policy: &Policy,
    alpha: f64,
    gamma: f64,
    oracle: Option<&Oracle>,
    rng: &mut LabRng,
) -> Result<TargetReport, AgentError> {
    if batch.is_empty() {
        return Err(AgentError::EmptyBatch);
    }
    if mode == TargetMode::OraclePatch && oracle.is_none() {
        return Err(AgentError::MissingOracle);
    }
    let next = policy.sample(batch.next_states.view(), rng)?;
    let next_q = q.target_values(batch.next_states.view(), next.actions.view())?;
    let mut targets = soft_targets(
        batch.rewards.view(),
        batch.dones.view(),
        next_q.view(),
        mode.min_set(q.len()),
        next.log_prob.view(),
        alpha,
        gamma,
    );
    let mut patched = 0;
    if let (TargetMode::OraclePatch, Some(oracle)) = (mode, oracle) {
        for b in 0..batch.len() {
            let s = State2::new(batch.next_states[[b, 0]], batch.next_states[[b, 1]]);
            if oracle.reach.is_edge_of_reach(&s) {
                targets[b] = batch.rewards[b] + gamma * (1.0 - batch.dones[b]) * oracle.values.interpolate(&s);
                patched += 1;
            }
        }
    }
    Ok(TargetReport { targets, patched })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CriticStats {
    /// Sum over critics of the mean squared error, plus `eta * diversity`.
    pub loss: f64,
    /// Mean over critics of the mean squared error.
    pub mse: f64,
    /// Mean pairwise cosine alignment of action gradients.
    pub diversity: f64,
}

const NORM_EPS_SQ: f64 = 1e-12;

/// Mean over samples and ordered critic pairs `i != j` of
/// `cos(grad_a Q_i, grad_a Q_j)`, and its gradient with respect to each
/// critic's action gradient. `grads[i]` is `[B, 2]`.
pub fn diversity_term(grads: &[Array2<f64>]) -> (f64, Vec<Array2<f64>>) {
    let n = grads.len();
    let b = grads[0].nrows();
    let scale = 1.0 / (b as f64 * (n * (n - 1)) as f64);
    let mut value = 0.0;
    let mut coef: Vec<Array2<f64>> = (0..n).map(|_| Array2::zeros((b, 2))).collect();
    for row in 0..b {
        let g: Vec<[f64; 2]> = grads.iter().map(|m| [m[[row, 0]], m[[row, 1]]]).collect();
        let norm: Vec<f64> = g
            .iter()
            .map(|v| (v[0] * v[0] + v[1] * v[1] + NORM_EPS_SQ).sqrt())
            .collect();
        for i in 0..n {
            for j in i + 1..n {
                let dot = g[i][0] * g[j][0] + g[i][1] * g[j][1];
                let cos = dot / (norm[i] * norm[j]);
                value += 2.0 * cos;
                for d in 0..2 {
                    // Each unordered pair appears twice among ordered pairs.
                    coef[i][[row, d]] +=
                        2.0 * scale * (g[j][d] / (norm[i] * norm[j]) - cos * g[i][d] / (norm[i] * norm[i]));
                    coef[j][[row, d]] +=
                        2.0 * scale * (g[i][d] / (norm[i] * norm[j]) - cos * g[j][d] / (norm[j] * norm[j]));
                }
            }
        }
    }
    (value * scale, coef)
}

/// Critic loss and its parameter gradients for every member: each critic
/// regresses onto the shared `targets`; with `eta > 0` the action-gradient
/// diversity term is added.
pub fn critic_loss_and_grads(
    net: &EnsembleMlp,
    sa: ArrayView2<f64>,
    targets: ArrayView1<f64>,
    eta: f64,
) -> Result<(CriticStats, EnsembleMlp), AgentError> {
    let n = net.len();
    let b = sa.nrows();
    if b == 0 {
        return Err(AgentError::EmptyBatch);
    }
    let mut grads = net.zeros_like();
    let mut views = grads.grad_views();
    let ones = Array2::ones((b, 1));
    let mut total_mse = 0.0;
    let mut tapes = Vec::with_capacity(n);
    let mut deltas = Vec::new();
    let mut action_grads = Vec::new();
    for (i, view) in views.iter_mut().enumerate() {
        let member = net.member(i);
        let tape = member.forward_tape(sa)?;
        let q = tape.output().column(0).to_owned();
        let err = &q - &targets;
        total_mse += err.mapv(|e| e * e).sum() / b as f64;
        let dout = (err * (2.0 / b as f64)).insert_axis(Axis(1));
        member.backward(&tape, dout.view(), Some(view))?;
        if eta > 0.0 {
            let (d, dinput) = member.backward_deltas(&tape, ones.view())?;
            deltas.push(d);
            action_grads.push(dinput.slice(s![.., 2..]).to_owned());
        }
        tapes.push(tape);
    }
    let mut diversity = 0.0;
    if eta > 0.0 {
        let (value, coef) = diversity_term(&action_grads);
        diversity = value;
        for (i, view) in views.iter_mut().enumerate() {
            let mut tangent = Array2::zeros((b, 4));
            tangent.slice_mut(s![.., 2..]).assign(&(&coef[i] * eta));
            net.member(i)
                .accumulate_input_gradient_grads(&tapes[i], &deltas[i], tangent.view(), view)?;
        }
    }
    drop(views);
    let loss = total_mse + eta * diversity;
    if !loss.is_finite() {
        return Err(AgentError::NonFiniteLoss(format!("critic loss {loss} (mse sum {total_mse}, diversity {diversity})")));
    }
    Ok((
        CriticStats {
            loss,
            mse: total_mse / n as f64,
            diversity,
        },
        grads,
    ))
}

/// Minimum over a critic set, and the gradient of that minimum with respect
/// to the action.
pub trait Critic {
    fn min_value_and_action_grad(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>), AgentError>;
}

/// The leading `set` members of an ensemble, combined by minimum.
pub struct MinOver<'a> {
    pub net: &'a EnsembleMlp,
    pub set: usize,
}

impl Critic for MinOver<'_> {
    fn min_value_and_action_grad(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
    ) -> Result<(Array1<f64>, Array2<f64>), AgentError> {
        let sa = state_action_matrix(states, actions);
        let b = sa.nrows();
        let mut tapes = Vec::with_capacity(self.set);
        let mut values = Array2::zeros((self.set, b));
        for i in 0..self.set {
            let tape = self.net.member(i).forward_tape(sa.view())?;
            values.row_mut(i).assign(&tape.output().column(0));
            tapes.push(tape);
        }
        let chosen: Vec<usize> = (0..b).map(|c| argmin_first(&values.view(), self.set, c)).collect();
        let mut q = Array1::zeros(b);
        let mut grad = Array2::zeros((b, 2));
        for (i, tape) in tapes.iter().enumerate() {
            if !chosen.contains(&i) {
                continue;
            }
            let dout = Array2::from_shape_fn((b, 1), |(c, _)| if chosen[c] == i { 1.0 } else { 0.0 });
            let dinput = self.net.member(i).backward(tape, dout.view(), None)?;
            for c in (0..b).filter(|&c| chosen[c] == i) {
                q[c] = values[[i, c]];
                grad[[c, 0]] = dinput[[c, 2]];
                grad[[c, 1]] = dinput[[c, 3]];
            }
        }
        Ok((q, grad))
    }
}

pub(crate) fn check_finite_params<P: Parameters>(p: &P, what: &str) -> Result<(), AgentError> {
    for block in p.param_blocks() {
        if block.data.iter().any(|v| !v.is_finite()) {
            return Err(AgentError::NonFiniteLoss(format!("{what}: block `{}` is non-finite", block.name)));
        }
    }
    Ok(())
}
