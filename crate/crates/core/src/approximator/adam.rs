use serde::{Deserialize, Serialize};

use super::{ApproxError, Parameters};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new<P: Parameters>(params: &P, config: AdamConfig) -> Self {
        let sizes: Vec<usize> = params.param_blocks().iter().map(|b| b.data.len()).collect();
        Self {
            config,
            step: 0,
            first: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            second: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Parameters are untouched if any gradient entry is
    /// non-finite.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<(), ApproxError> {
        let grad_blocks = grads.param_blocks();
        if grad_blocks.len() != self.first.len() {
            return Err(ApproxError::BlockMismatch(format!(
                "optimiser tracks {} blocks, gradient has {}",
                self.first.len(),
                grad_blocks.len()
            )));
        }
        for (g, m) in grad_blocks.iter().zip(&self.first) {
            if g.data.len() != m.len() {
                return Err(ApproxError::BlockMismatch(g.name.clone()));
            }
            if g.data.iter().any(|v| !v.is_finite()) {
                return Err(ApproxError::NonFiniteGradient {
                    block: g.name.clone(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .param_blocks_mut()
            .into_iter()
            .zip(&grad_blocks)
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
                v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::approximator::{Head, Mlp};
    use ndarray::{array, Array1};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = array![1.0, -2.0, 3.0];
        let before = p.clone();
        let mut opt = Adam::new(&p, AdamConfig::default());
        opt.step(&mut p, &Array1::zeros(3)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_against_sign() {
        let mut p = array![0.0, 0.0, 0.0];
        let g = array![5.0, -0.01, 300.0];
        let cfg = AdamConfig::default();
        let mut opt = Adam::new(&p, cfg);
        opt.step(&mut p, &g).unwrap();
        for i in 0..3 {
            let expected = -cfg.lr * g[i] / (g[i].abs() + cfg.eps);
            assert!((p[i] - expected).abs() < 1e-15);
            assert!((p[i].abs() - cfg.lr).abs() < 1e-9);
        }
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Mlp::new(&[2, 3, 1], Head::Identity, &mut rng);
        let before = net.clone();
        let mut grads = net.zeros_like();
        grads.biases_mut(1)[0] = f64::NAN;
        let mut opt = Adam::new(&net, AdamConfig::default());
        let err = opt.step(&mut net, &grads).unwrap_err();
        match err {
            ApproxError::NonFiniteGradient { block } => assert_eq!(block, "layers.1.bias"),
            other => panic!("unexpected {other}"),
        }
        assert_eq!(net, before);
    }

    #[test]
    fn identical_runs_are_bit_identical() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(77);
            let mut net = Mlp::new(&[2, 8, 1], Head::Identity, &mut rng);
            let mut opt = Adam::new(&net, AdamConfig::default());
            let x = array![[0.5, -0.25], [1.0, 2.0]];
            for _ in 0..50 {
                let tape = net.forward_tape(x.view()).unwrap();
                let dout = tape.output().mapv(|v| 2.0 * (v - 1.0));
                let (g, _) = net.backward(&tape, dout.view()).unwrap();
                opt.step(&mut net, &g).unwrap();
            }
            net
        };
        assert_eq!(run(), run());
    }
}
