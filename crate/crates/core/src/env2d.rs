//! The planar point-mass environment `s' = s + a` and its exact reachability
//! geometry.
//!
//! Starting states are uniform over an axis-aligned box. With per-axis action
//! bound `a_max`, the set of states reachable in exactly `t` steps is that box
//! Minkowski-expanded by `t * a_max` per axis, which makes the edge-of-reach
//! set (reachable at step `k`, unreachable at any earlier step) an annulus
//! between two boxes.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("action ({dx}, {dy}) exceeds the per-axis bound {a_max}")]
    ActionOutOfBounds { dx: f64, dy: f64, a_max: f64 },
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct State2 {
    pub x: f64,
    pub y: f64,
}

impl State2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist2(&self, other: &State2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action2 {
    pub dx: f64,
    pub dy: f64,
}

impl Action2 {
    pub const fn new(dx: f64, dy: f64) -> Self {
        Self { dx, dy }
    }

    pub fn within(&self, a_max: f64) -> bool {
        self.dx.abs() <= a_max && self.dy.abs() <= a_max
    }
}

/// One isotropic Gaussian bump of the reward landscape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bump {
    pub center: State2,
    pub amplitude: f64,
    pub width: f64,
}

/// Reward as a sum of Gaussian bumps, evaluated at the arrived state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardField {
    pub bumps: Vec<Bump>,
}

impl Default for RewardField {
    fn default() -> Self {
        Self {
            bumps: vec![Bump {
                center: State2::new(6.0, 6.0),
                amplitude: 1.0,
                width: 1.5,
            }],
        }
    }
}

impl RewardField {
    pub fn zero() -> Self {
        Self { bumps: Vec::new() }
    }

    pub fn value(&self, s: &State2) -> f64 {
        self.bumps
            .iter()
            .map(|b| b.amplitude * (-s.dist2(&b.center) / (2.0 * b.width * b.width)).exp())
            .sum()
    }

    /// `sum |amplitude|`, an upper bound on `|value|`.
    pub fn bound(&self) -> f64 {
        self.bumps.iter().map(|b| b.amplitude.abs()).sum()
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        for (i, b) in self.bumps.iter().enumerate() {
            if !(b.width > 0.0 && b.width.is_finite()) {
                return Err(EnvError::InvalidSpec(format!("bump {i}: width must be > 0")));
            }
            if !b.amplitude.is_finite() || !b.center.is_finite() {
                return Err(EnvError::InvalidSpec(format!("bump {i}: non-finite field")));
            }
        }
        Ok(())
    }
}

/// Closed axis-aligned box `[lo.x, hi.x] x [lo.y, hi.y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Aabb {
    pub lo: State2,
    pub hi: State2,
}

impl Aabb {
    pub const fn new(lo: State2, hi: State2) -> Self {
        Self { lo, hi }
    }

    pub fn square(half: f64) -> Self {
        Self::new(State2::new(-half, -half), State2::new(half, half))
    }

    pub fn is_valid(&self) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && self.lo.x <= self.hi.x && self.lo.y <= self.hi.y
    }

    pub fn contains(&self, s: &State2) -> bool {
        s.x >= self.lo.x && s.x <= self.hi.x && s.y >= self.lo.y && s.y <= self.hi.y
    }

    pub fn expand(&self, by: f64) -> Self {
        Self::new(
            State2::new(self.lo.x - by, self.lo.y - by),
            State2::new(self.hi.x + by, self.hi.y + by),
        )
    }

    /// True when `other` lies in the interior of `self` on every side.
    pub fn strictly_contains_box(&self, other: &Aabb) -> bool {
        self.lo.x < other.lo.x && self.lo.y < other.lo.y && self.hi.x > other.hi.x && self.hi.y > other.hi.y
    }

    pub fn width(&self) -> f64 {
        self.hi.x - self.lo.x
    }

    pub fn height(&self) -> f64 {
        self.hi.y - self.lo.y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub reward: RewardField,
    pub a_max: f64,
    pub horizon: usize,
    pub rollout_len: usize,
    pub init_box: Aabb,
    pub gamma: f64,
}

impl Default for EnvSpec {
    fn default() -> Self {
        Self {
            reward: RewardField::default(),
            a_max: 1.0,
            horizon: 30,
            rollout_len: 10,
            init_box: Aabb::square(2.0),
            gamma: 0.99,
        }
    }
}

impl EnvSpec {
    /// Collects every violated invariant rather than stopping at the first.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.reward.validate() {
            out.push(format!("env.reward: {e}"));
        }
        if !(self.a_max >= 0.0 && self.a_max.is_finite()) {
            out.push("env.a_max: must be finite and >= 0".into());
        }
        if self.horizon == 0 {
            out.push("env.horizon: must be >= 1".into());
        }
        if self.rollout_len == 0 || self.rollout_len > self.horizon {
            out.push("env.rollout_len: must satisfy 1 <= k <= horizon".into());
        }
        if !self.init_box.is_valid() {
            out.push("env.init_box: must be non-empty with lo <= hi".into());
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            out.push("env.gamma: must lie in (0, 1)".into());
        }
        out
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(EnvError::InvalidSpec(problems.join("; ")))
        }
    }
}

/// True transition: move by the action, reward read at the arrived state.
pub fn step(s: State2, a: Action2, field: &RewardField, a_max: f64) -> Result<(State2, f64), EnvError> {
    if !a.within(a_max) {
        return Err(EnvError::ActionOutOfBounds {
            dx: a.dx,
            dy: a.dy,
            a_max,
        });
    }
    let next = State2::new(s.x + a.dx, s.y + a.dy);
    Ok((next, field.value(&next)))
}

pub fn sample_initial<R: Rng + ?Sized>(rng: &mut R, spec: &EnvSpec) -> State2 {
    let b = &spec.init_box;
    let u: f64 = rng.random();
    let v: f64 = rng.random();
    State2::new(b.lo.x + u * b.width(), b.lo.y + v * b.height())
}

/// Supports of the step-`t` state marginals, `t = 0..=horizon`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReachSpec {
    pub boxes: Vec<Aabb>,
    pub rollout_len: usize,
}

impl ReachSpec {
    pub fn at(&self, t: usize) -> &Aabb {
        &self.boxes[t]
    }

    /// Reachable at step `k` but at no step `1..k`. Because the boxes are
    /// nested this is membership in `boxes[k] \ boxes[k-1]`.
    pub fn is_edge_of_reach(&self, s: &State2) -> bool {
        let k = self.rollout_len;
        self.boxes[k].contains(s) && !self.boxes[k - 1].contains(s)
    }

    /// Reachable at some step strictly before `k`.
    pub fn is_within_reach(&self, s: &State2) -> bool {
        self.boxes[self.rollout_len - 1].contains(s)
    }
}

pub fn reach_boxes(spec: &EnvSpec) -> ReachSpec {
    let boxes = (0..=spec.horizon)
        .map(|t| spec.init_box.expand(t as f64 * spec.a_max))
        .collect();
    ReachSpec {
        boxes,
        rollout_len: spec.rollout_len,
    }
}

pub fn is_edge_of_reach(s: &State2, spec: &EnvSpec) -> bool {
    reach_boxes(spec).is_edge_of_reach(s)
}
