use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use super::AgentError;
use crate::approximator::{split_gaussian, Head, Mlp, Parameters, Tape};
use crate::env2d::{Action2, State2};
use crate::rollouts::ActionSource;
use crate::LabRng;

const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_8;

/// Tanh-squashed diagonal Gaussian policy over 2D actions.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    pub(crate) net: Mlp,
    pub(crate) a_max: f64,
}

/// A reparameterised sample `a = a_max * tanh(mean + std * eps)` together
/// with everything the actor gradient needs.
#[derive(Debug, Clone)]
pub struct PolicySample {
    pub actions: Array2<f64>,
    pub log_prob: Array1<f64>,
    pub(crate) tape: Tape,
    pub(crate) eps: Array2<f64>,
    pub(crate) pre_squash: Array2<f64>,
    pub(crate) std: Array2<f64>,
    pub(crate) log_std_pass: Array2<f64>,
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// `log(1 - tanh(u)^2)` without cancellation for large `|u|`.
pub(crate) fn log_one_minus_tanh_sq(u: f64) -> f64 {
    2.0 * (std::f64::consts::LN_2 - u - softplus(-2.0 * u))
}

/// Log-density of `a = a_max * tanh(u)` for `u ~ N(mean, std^2)` per dimension,
/// written in terms of the standardised noise `eps` and pre-squash value `u`.
pub fn squashed_log_prob(eps: f64, log_std: f64, u: f64, a_max: f64) -> f64 {
    -0.5 * eps * eps - log_std - HALF_LOG_2PI - a_max.ln() - log_one_minus_tanh_sq(u)
}

impl Policy {
    pub fn new(hidden: &[usize], a_max: f64, rng: &mut LabRng) -> Self {
        let mut widths = vec![2];
        widths.extend(hidden);
        widths.push(4);
        Self {
            net: Mlp::new(&widths, Head::DEFAULT_GAUSSIAN, rng),
            a_max,
        }
    }

    pub fn from_net(net: Mlp, a_max: f64) -> Result<Self, AgentError> {
        if net.in_dim() != 2 || net.out_dim() != 4 || !matches!(net.head(), Head::Gaussian { .. }) {
            return Err(AgentError::Shape(format!(
                "policy network must map 2 -> 4 with a Gaussian head, got widths {:?}",
                net.widths()
            )));
        }
        Ok(Self { net, a_max })
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn a_max(&self) -> f64 {
        self.a_max
    }

    fn clamp(&self) -> (f64, f64) {
        match self.net.head() {
            Head::Gaussian {
                log_std_min,
                log_std_max,
            } => (log_std_min, log_std_max),
            Head::Identity => unreachable!("checked at construction"),
        }
    }

    /// Mean and clamped log-std for each state.
    pub fn distribution(&self, states: ArrayView2<f64>) -> Result<(Array2<f64>, Array2<f64>), AgentError> {
        let raw = self.net.forward(states)?;
        let (lo, hi) = self.clamp();
        let g = split_gaussian(&raw, lo, hi);
        Ok((g.mean, g.log_std))
    }

    /// `a_max * tanh(mean)`.
    pub fn deterministic(&self, states: ArrayView2<f64>) -> Result<Array2<f64>, AgentError> {
        let (mean, _) = self.distribution(states)?;
        Ok(mean.mapv(|m| self.a_max * m.tanh()))
    }

    /// Log-density of given in-bound actions. Actions on the bound are
    /// nudged inside so the inverse squash stays finite.
    pub fn log_prob_of(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>, AgentError> {
        let (mean, log_std) = self.distribution(states)?;
        Ok(Array1::from_shape_fn(states.nrows(), |b| {
            (0..2)
                .map(|d| {
                    let y = (actions[[b, d]] / self.a_max).clamp(-1.0 + 1e-9, 1.0 - 1e-9);
                    let u = y.atanh();
                    let eps = (u - mean[[b, d]]) * (-log_std[[b, d]]).exp();
                    squashed_log_prob(eps, log_std[[b, d]], u, self.a_max)
                })
                .sum()
        }))
    }

    pub fn draw_noise(&self, rows: usize, rng: &mut LabRng) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, 2), || rng.sample(StandardNormal))
    }

    pub fn sample(&self, states: ArrayView2<f64>, rng: &mut LabRng) -> Result<PolicySample, AgentError> {
        let eps = self.draw_noise(states.nrows(), rng);
        self.sample_with_noise(states, eps)
    }

    pub fn sample_with_noise(&self, states: ArrayView2<f64>, eps: Array2<f64>) -> Result<PolicySample, AgentError> {
        let tape = self.net.forward_tape(states)?;
        let (lo, hi) = self.clamp();
        let g = split_gaussian(tape.output(), lo, hi);
        let std = g.log_std.mapv(f64::exp);
        let pre_squash = &g.mean + &(&std * &eps);
        let actions = pre_squash.mapv(|u| self.a_max * u.tanh());
        let mut log_prob = Array1::zeros(states.nrows());
        for b in 0..states.nrows() {
            log_prob[b] = (0..2)
                .map(|d| squashed_log_prob(eps[[b, d]], g.log_std[[b, d]], pre_squash[[b, d]], self.a_max))
                .sum();
        }
        Ok(PolicySample {
            actions,
            log_prob,
            tape,
            eps,
            pre_squash,
            std,
            log_std_pass: g.log_std_pass,
        })
    }
}

impl ActionSource for Policy {
    fn sample_actions(&self, states: &[State2], rng: &mut LabRng) -> Vec<Action2> {
        let x = states_matrix(states);
        let sample = self.sample(x.view(), rng).expect("policy input width is fixed");
        sample
            .actions
            .axis_iter(Axis(0))
            .map(|row| Action2::new(row[0], row[1]))
            .collect()
    }
}

/// Deterministic (mean-action) view of a policy.
pub struct Greedy<'a>(pub &'a Policy);

impl ActionSource for Greedy<'_> {
    fn sample_actions(&self, states: &[State2], _rng: &mut LabRng) -> Vec<Action2> {
        let x = states_matrix(states);
        let a = self.0.deterministic(x.view()).expect("policy input width is fixed");
        a.axis_iter(Axis(0)).map(|row| Action2::new(row[0], row[1])).collect()
    }
}

pub fn states_matrix(states: &[State2]) -> Array2<f64> {
    Array2::from_shape_fn((states.len(), 2), |(i, j)| if j == 0 { states[i].x } else { states[i].y })
}

pub fn actions_matrix(actions: &[Action2]) -> Array2<f64> {
    Array2::from_shape_fn((actions.len(), 2), |(i, j)| if j == 0 { actions[i].dx } else { actions[i].dy })
}

impl Parameters for Policy {
    fn param_blocks(&self) -> Vec<crate::approximator::ParamBlock<'_>> {
        self.net.param_blocks()
    }

    fn param_blocks_mut(&mut self) -> Vec<crate::approximator::ParamBlockMut<'_>> {
        self.net.param_blocks_mut()
    }
}
