//! Offline model-based reinforcement learning laboratory built around a 2D
//! point-mass task where the set of edge-of-reach states is known exactly.
//!
//! The crate covers the full loop: a true environment with analytic
//! reachability ([`env2d`]), small differentiable networks ([`approximator`]),
//! true / learned / random / interpolated dynamics with uncertainty penalties
//! ([`dynamics`]), truncated rollouts and replay ([`rollouts`]), a SAC agent
//! with a critic ensemble and three target modes ([`agent`]), diagnostics
//! with a dynamic-programming value oracle ([`analysis`]), and the experiment
//! harness ([`harness`]).

pub mod agent;
pub mod analysis;
pub mod approximator;
pub mod dynamics;
pub mod env2d;
pub mod harness;
pub mod rollouts;

pub use agent::{Agent, AgentConfig, Policy, QEnsemble, TargetMode};
pub use analysis::ValueGrid;
pub use dynamics::{DynamicsModel, GaussianEnsemble, PenaltyKind};
pub use env2d::{Aabb, Action2, EnvSpec, ReachSpec, RewardField, State2};
pub use harness::{ExperimentConfig, MetricsRecord};
pub use rollouts::{ReplayBuffer, Transition};

use rand::SeedableRng;

/// Deterministic, cloneable generator used everywhere randomness is needed.
pub type LabRng = rand_chacha::ChaCha8Rng;

/// Independent named stream derived from a master seed. Streams with
/// different names never overlap, so adding draws to one component does not
/// shift another's randomness.
pub fn substream(master: u64, name: &str) -> LabRng {
    let mut rng = LabRng::seed_from_u64(master);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}
