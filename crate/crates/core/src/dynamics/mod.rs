//! Environment models used to generate synthetic rollouts: the true dynamics,
//! a learned Gaussian ensemble, a fixed random network, and convex
//! interpolations between any two of them. Also the ensemble-disagreement
//! reward penalties used by dynamics-pessimistic methods.

mod ensemble;

pub use ensemble::{
    fit_member, holdout_nll, nll_loss, train_ensemble, EnsembleTrainConfig, GaussianEnsemble, MemberPredictions,
    TrainReport, INPUT_DIM, TARGET_DIM,
};

use ndarray::{s, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::approximator::{ApproxError, Head, Mlp};
use crate::env2d::{self, Action2, RewardField, State2};
use crate::LabRng;

#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("action ({dx}, {dy}) exceeds the per-axis bound {a_max}")]
    ActionOutOfBounds { dx: f64, dy: f64, a_max: f64 },
    #[error("cannot train a dynamics model on an empty dataset")]
    EmptyDataset,
    #[error("non-finite training loss in member {member} at epoch {epoch}: {detail}")]
    NonFiniteLoss { member: usize, epoch: usize, detail: String },
    #[error("invalid ensemble: {0}")]
    InvalidEnsemble(String),
    #[error("interpolation weight {0} is outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("interpolation endpoints must be different model variants (both are {0})")]
    SameEndpoints(&'static str),
    #[error("uncertainty penalties need a learned ensemble, not the {0} model")]
    UnsupportedVariant(&'static str),
    #[error(transparent)]
    Approx(#[from] ApproxError),
}

/// Fixed, randomly initialised network standing in for an uninformative model.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomModel {
    net: Mlp,
    a_max: f64,
}

impl RandomModel {
    pub fn new(hidden: &[usize], a_max: f64, rng: &mut LabRng) -> Self {
        let mut widths = vec![INPUT_DIM];
        widths.extend(hidden);
        widths.push(TARGET_DIM);
        Self {
            net: Mlp::new(&widths, Head::Identity, rng),
            a_max,
        }
    }

    pub fn predict_batch(&self, states: &[State2], actions: &[Action2]) -> Result<Vec<(State2, f64)>, DynamicsError> {
        ensemble::check_actions(actions, self.a_max)?;
        let mut x = Array2::zeros((states.len(), INPUT_DIM));
        for (i, (s, a)) in states.iter().zip(actions).enumerate() {
            x.row_mut(i).assign(&ndarray::arr1(&[s.x, s.y, a.dx, a.dy]));
        }
        let out = self.net.forward(x.view())?;
        Ok(states
            .iter()
            .enumerate()
            .map(|(i, s)| (State2::new(s.x + out[[i, 0]], s.y + out[[i, 1]]), out[[i, 2]]))
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DynamicsModel {
    True { field: RewardField, a_max: f64 },
    Learned(GaussianEnsemble),
    Random(RandomModel),
    /// `(1 - alpha) * base + alpha * target`, applied to next states and rewards.
    Interpolated {
        base: Box<DynamicsModel>,
        target: Box<DynamicsModel>,
        alpha: f64,
    },
}

impl DynamicsModel {
    pub fn variant_name(&self) -> &'static str {
        match self {
            DynamicsModel::True { .. } => "true",
            DynamicsModel::Learned(_) => "learned",
            DynamicsModel::Random(_) => "random",
            DynamicsModel::Interpolated { .. } => "interpolated",
        }
    }

    pub fn interpolated(base: DynamicsModel, target: DynamicsModel, alpha: f64) -> Result<Self, DynamicsError> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(DynamicsError::InvalidAlpha(alpha));
        }
        if base.variant_name() == target.variant_name() {
            return Err(DynamicsError::SameEndpoints(base.variant_name()));
        }
        Ok(DynamicsModel::Interpolated {
            base: Box::new(base),
            target: Box::new(target),
            alpha,
        })
    }

    pub fn predict(&self, s: State2, a: Action2, rng: &mut LabRng) -> Result<(State2, f64), DynamicsError> {
        Ok(self.predict_batch(&[s], &[a], rng)?[0])
    }

    /// Batched prediction. For interpolated models both endpoints see the
    /// same rng draw sequence: the base runs on a clone of the caller's rng
    /// and the target on the caller's rng itself.
    pub fn predict_batch(
        &self,
        states: &[State2],
        actions: &[Action2],
        rng: &mut LabRng,
    ) -> Result<Vec<(State2, f64)>, DynamicsError> {
        match self {
            DynamicsModel::True { field, a_max } => states
                .iter()
                .zip(actions)
                .map(|(&s, &a)| {
                    env2d::step(s, a, field, *a_max).map_err(|_| DynamicsError::ActionOutOfBounds {
                        dx: a.dx,
                        dy: a.dy,
                        a_max: *a_max,
                    })
                })
                .collect(),
            DynamicsModel::Learned(ens) => ens.predict_batch(states, actions, rng),
            DynamicsModel::Random(m) => m.predict_batch(states, actions),
            DynamicsModel::Interpolated { base, target, alpha } => {
                let mut shared = rng.clone();
                let b = base.predict_batch(states, actions, &mut shared)?;
                let t = target.predict_batch(states, actions, rng)?;
                Ok(b.into_iter().zip(t).map(|(b, t)| mix(b, t, *alpha)).collect())
            }
        }
    }

    /// Reward penalty for each `(s, a)`; zero for the true model.
    pub fn penalty_batch(
        &self,
        kind: PenaltyKind,
        states: &[State2],
        actions: &[Action2],
    ) -> Result<Vec<f64>, DynamicsError> {
        match self {
            DynamicsModel::True { .. } => Ok(vec![0.0; states.len()]),
            DynamicsModel::Learned(ens) => penalty_batch(kind, ens, states, actions),
            DynamicsModel::Random(_) => Err(DynamicsError::UnsupportedVariant("random")),
            DynamicsModel::Interpolated { base, target, alpha } => {
                let b = base.penalty_batch(kind, states, actions)?;
                let t = target.penalty_batch(kind, states, actions)?;
                Ok(b.iter().zip(&t).map(|(b, t)| (1.0 - alpha) * b + alpha * t).collect())
            }
        }
    }
}

fn mix(base: (State2, f64), target: (State2, f64), alpha: f64) -> (State2, f64) {
    // Endpoints are returned verbatim so that alpha in {0, 1} is bit-exact
    // even for signed zeros and infinities.
    if alpha == 0.0 {
        return base;
    }
    if alpha == 1.0 {
        return target;
    }
    let w = 1.0 - alpha;
    (
        State2::new(w * base.0.x + alpha * target.0.x, w * base.0.y + alpha * target.0.y),
        w * base.1 + alpha * target.1,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyKind {
    /// Largest Frobenius norm of a member's predicted covariance.
    Mopo,
    /// Largest pairwise distance between member means.
    Morel,
    /// Standard deviation of member predictions, 2-norm over output dims.
    Mobile,
}

/// Penalties from per-member predictions of one `(s, a)` pair:
/// `means[i]` and `stds[i]` are member `i`'s output vectors.
pub fn penalty_from_members(kind: PenaltyKind, means: &[Vec<f64>], stds: &[Vec<f64>]) -> f64 {
    match kind {
        PenaltyKind::Mopo => stds
            .iter()
            .map(|sd| sd.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max),
        PenaltyKind::Morel => {
            let mut best = 0.0f64;
            for i in 0..means.len() {
                for j in i + 1..means.len() {
                    let d: f64 = means[i]
                        .iter()
                        .zip(&means[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    best = best.max(d.sqrt());
                }
            }
            best
        }
        PenaltyKind::Mobile => {
            let n = means.len() as f64;
            let dims = means.first().map_or(0, Vec::len);
            let mut total = 0.0;
            for d in 0..dims {
                // Centred on the first member so identical members give exactly 0.
                let c = means[0][d];
                let mu = means.iter().map(|m| m[d] - c).sum::<f64>() / n;
                total += means.iter().map(|m| (m[d] - c - mu).powi(2)).sum::<f64>() / n;
            }
            total.sqrt()
        }
    }
}

pub fn penalty(kind: PenaltyKind, ens: &GaussianEnsemble, s: State2, a: Action2) -> Result<f64, DynamicsError> {
    Ok(penalty_batch(kind, ens, &[s], &[a])?[0])
}

pub fn penalty_batch(
    kind: PenaltyKind,
    ens: &GaussianEnsemble,
    states: &[State2],
    actions: &[Action2],
) -> Result<Vec<f64>, DynamicsError> {
    let preds = ens.member_predictions(states, actions)?;
    let n = ens.members();
    Ok((0..states.len())
        .map(|row| {
            let means: Vec<Vec<f64>> = (0..n).map(|i| preds.mean.slice(s![i, row, ..]).to_vec()).collect();
            let stds: Vec<Vec<f64>> = (0..n).map(|i| preds.std.slice(s![i, row, ..]).to_vec()).collect();
            penalty_from_members(kind, &means, &stds)
        })
        .collect())
}

/// A penalty kind with its weight `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Penalty {
    pub kind: PenaltyKind,
    pub weight: f64,
}

/// Prediction with the reward reduced by `weight * penalty`. Returns the
/// penalised transitions together with the raw penalties.
pub fn penalized_predict_batch(
    model: &DynamicsModel,
    penalty: Option<Penalty>,
    states: &[State2],
    actions: &[Action2],
    rng: &mut LabRng,
) -> Result<(Vec<(State2, f64)>, Vec<f64>), DynamicsError> {
    let mut out = model.predict_batch(states, actions, rng)?;
    let pens = match penalty {
        Some(p) if p.weight != 0.0 => {
            let pens = model.penalty_batch(p.kind, states, actions)?;
            for (o, pen) in out.iter_mut().zip(&pens) {
                o.1 -= p.weight * pen;
            }
            pens
        }
        _ => vec![0.0; states.len()],
    };
    Ok((out, pens))
}

pub fn penalized_reward(
    model: &DynamicsModel,
    penalty: Option<Penalty>,
    s: State2,
    a: Action2,
    rng: &mut LabRng,
) -> Result<(State2, f64), DynamicsError> {
    Ok(penalized_predict_batch(model, penalty, &[s], &[a], rng)?.0[0])
}

/// Draws a uniformly random action, handy for behaviour data.
pub fn uniform_action(rng: &mut LabRng, a_max: f64) -> Action2 {
    if a_max == 0.0 {
        return Action2::default();
    }
    Action2::new(rng.random_range(-a_max..=a_max), rng.random_range(-a_max..=a_max))
}
