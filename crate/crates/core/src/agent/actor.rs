use ndarray::{Array1, Array2, ArrayView2};

use super::critic::Critic;
use super::policy::{Policy, PolicySample};
use super::AgentError;
use crate::approximator::Mlp;

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ActorStats {
    /// `mean(alpha * log_prob - min_q)`.
    pub loss: f64,
    pub mean_log_prob: f64,
    pub mean_q: f64,
}

/// Actor loss `mean_b [alpha * log pi(a_b|s_b) - Q_min(s_b, a_b)]` for the
/// reparameterised sample drawn with the given standard-normal noise, and
/// its gradient with respect to the policy parameters.
pub fn actor_loss_and_grads(
    policy: &Policy,
    critic: &dyn Critic,
    states: ArrayView2<f64>,
    eps: Array2<f64>,
    alpha: f64,
) -> Result<(ActorStats, Mlp, PolicySample), AgentError> {
    let b = states.nrows();
    if b == 0 {
        return Err(AgentError::EmptyBatch);
    }
    let sample = policy.sample_with_noise(states, eps)?;
    let (q, dq_da) = critic.min_value_and_action_grad(states, sample.actions.view())?;
    let a_max = policy.a_max;
    let inv_b = 1.0 / b as f64;
    let mut dout = Array2::zeros((b, 4));
    for row in 0..b {
        for d in 0..2 {
            let u = sample.pre_squash[[row, d]];
            let t = u.tanh();
            let du = inv_b * (alpha * 2.0 * t - dq_da[[row, d]] * a_max * (1.0 - t * t));
            dout[[row, d]] = du;
            let sigma_eps = sample.std[[row, d]] * sample.eps[[row, d]];
            dout[[row, 2 + d]] = sample.log_std_pass[[row, d]] * (-alpha * inv_b + du * sigma_eps);
        }
    }
    let (grads, _) = policy.net.backward(&sample.tape, dout.view())?;
    let mean_log_prob = sample.log_prob.mean().unwrap();
    let mean_q = q.mean().unwrap();
    let loss = alpha * mean_log_prob - mean_q;
    if !loss.is_finite() {
        return Err(AgentError::NonFiniteLoss(format!(
            "actor loss {loss} (mean log-prob {mean_log_prob}, mean q {mean_q})"
        )));
    }
    Ok((
        ActorStats {
            loss,
            mean_log_prob,
            mean_q,
        },
        grads,
        sample,
    ))
}

/// Gradient of `-log_alpha * mean(log_prob + target_entropy)` with respect
/// to `log_alpha`.
pub fn temperature_grad(log_prob: &Array1<f64>, target_entropy: f64) -> f64 {
    -(log_prob.mean().unwrap_or(0.0) + target_entropy)
}
