use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::AnalysisError;
use crate::env2d::{reach_boxes, Aabb, Action2, EnvSpec, State2};

/// Regular lattice of nodes covering a box, spacing `h`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub bounds: Aabb,
    pub h: f64,
    pub nx: usize,
    pub ny: usize,
}

impl GridSpec {
    /// Nodes at `lo + i * h` up to and including the first node at or past `hi`.
    pub fn new(bounds: Aabb, h: f64) -> Result<Self, AnalysisError> {
        if !(h > 0.0 && h.is_finite()) {
            return Err(AnalysisError::Invalid(format!("grid resolution must be positive, got {h}")));
        }
        if !bounds.is_valid() {
            return Err(AnalysisError::Invalid("grid box must be non-empty".into()));
        }
        let count = |w: f64| (w / h - 1e-9).ceil().max(1.0) as usize + 1;
        let nx = count(bounds.width());
        let ny = count(bounds.height());
        let bounds = Aabb::new(
            bounds.lo,
            State2::new(bounds.lo.x + (nx - 1) as f64 * h, bounds.lo.y + (ny - 1) as f64 * h),
        );
        Ok(Self { bounds, h, nx, ny })
    }

    /// `boxes[k]` padded by one unit at resolution `h`.
    pub fn default_for(env: &EnvSpec, h: f64) -> Result<Self, AnalysisError> {
        let reach = reach_boxes(env);
        Self::new(reach.at(env.rollout_len).expand(1.0), h)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, ix: usize, iy: usize) -> State2 {
        State2::new(self.bounds.lo.x + ix as f64 * self.h, self.bounds.lo.y + iy as f64 * self.h)
    }

    pub fn node_at(&self, idx: usize) -> State2 {
        self.node(idx % self.nx, idx / self.nx)
    }

    pub fn clamp(&self, s: &State2) -> State2 {
        State2::new(
            s.x.clamp(self.bounds.lo.x, self.bounds.hi.x),
            s.y.clamp(self.bounds.lo.y, self.bounds.hi.y),
        )
    }

    /// Four corner indices and bilinear weights for a (clamped) point.
    fn stencil(&self, s: &State2) -> ([usize; 4], [f64; 4]) {
        let s = self.clamp(s);
        let axis = |v: f64, lo: f64, n: usize| -> (usize, f64) {
            if n == 1 {
                return (0, 0.0);
            }
            let f = (v - lo) / self.h;
            let i = (f.floor() as usize).min(n - 2);
            (i, (f - i as f64).clamp(0.0, 1.0))
        };
        let (ix, tx) = axis(s.x, self.bounds.lo.x, self.nx);
        let (iy, ty) = axis(s.y, self.bounds.lo.y, self.ny);
        let ix1 = (ix + 1).min(self.nx - 1);
        let iy1 = (iy + 1).min(self.ny - 1);
        (
            [iy * self.nx + ix, iy * self.nx + ix1, iy1 * self.nx + ix, iy1 * self.nx + ix1],
            [(1.0 - tx) * (1.0 - ty), tx * (1.0 - ty), (1.0 - tx) * ty, tx * ty],
        )
    }

    pub fn interpolate(&self, values: &[f64], s: &State2) -> f64 {
        let (idx, w) = self.stencil(s);
        let mut v = 0.0;
        for k in 0..4 {
            if w[k] != 0.0 {
                v += w[k] * values[idx[k]];
            }
        }
        v
    }
}

/// `n x n` actions evenly spaced over `[-a_max, a_max]^2`.
pub fn action_lattice(a_max: f64, n: usize) -> Vec<Action2> {
    let coord = |i: usize| {
        if n == 1 {
            0.0
        } else {
            -a_max + 2.0 * a_max * i as f64 / (n - 1) as f64
        }
    };
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            out.push(Action2::new(coord(i), coord(j)));
        }
    }
    out
}

/// Optimal discounted values on a lattice, with the box acting as a wall.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueGrid {
    pub grid: GridSpec,
    pub values: Vec<f64>,
    pub greedy: Vec<Action2>,
    pub actions: Vec<Action2>,
    pub gamma: f64,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpConfig {
    pub h: f64,
    pub actions_per_axis: usize,
    pub tol: f64,
    pub max_iterations: usize,
}

impl Default for DpConfig {
    fn default() -> Self {
        Self {
            h: 0.25,
            actions_per_axis: 9,
            tol: 1e-6,
            max_iterations: 20_000,
        }
    }
}

/// Per-action move, either an exact lattice shift or a general offset.
enum Move {
    Shift(isize, isize),
    Offset(Action2),
}

impl ValueGrid {
    pub fn interpolate(&self, s: &State2) -> f64 {
        self.grid.interpolate(&self.values, s)
    }

    pub fn max_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max_a [R(s + a) + gamma * V(s + a)]` over the DP action set, returning
    /// the first maximiser.
    pub fn lookahead(&self, env: &EnvSpec, s: &State2) -> (Action2, f64) {
        let mut best = (self.actions[0], f64::NEG_INFINITY);
        for a in &self.actions {
            let next = self.grid.clamp(&State2::new(s.x + a.dx, s.y + a.dy));
            let v = env.reward.value(&next) + self.gamma * self.interpolate(&next);
            if v > best.1 {
                best = (*a, v);
            }
        }
        best
    }

    /// Mean undiscounted `H`-step return of the one-step-lookahead policy in
    /// the true environment, one episode per start state.
    pub fn optimal_return(&self, env: &EnvSpec, starts: &[State2]) -> f64 {
        let mut total = 0.0;
        for &s0 in starts {
            let mut s = s0;
            for _ in 0..env.horizon {
                let (a, _) = self.lookahead(env, &s);
                s = State2::new(s.x + a.dx, s.y + a.dy);
                total += env.reward.value(&s);
            }
        }
        total / starts.len() as f64
    }

    /// Largest change any node would see from one more backup.
    pub fn bellman_residual(&self, env: &EnvSpec) -> f64 {
        let moves = moves_for(&self.grid, &self.actions);
        let rewards = arrival_rewards(&self.grid, env);
        let (next, _) = backup(&self.grid, env, &moves, &rewards, &self.values, self.gamma);
        next.iter()
            .zip(&self.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Dense CSV: two header rows describing the lattice, then one row per node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let g = &self.grid;
        writeln!(w, "lo_x,lo_y,hi_x,hi_y,h,nx,ny,gamma")?;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            g.bounds.lo.x, g.bounds.lo.y, g.bounds.hi.x, g.bounds.hi.y, g.h, g.nx, g.ny, self.gamma
        )?;
        writeln!(w, "x,y,value,greedy_dx,greedy_dy")?;
        for (i, (v, a)) in self.values.iter().zip(&self.greedy).enumerate() {
            let s = g.node_at(i);
            writeln!(w, "{},{},{},{},{}", s.x, s.y, v, a.dx, a.dy)?;
        }
        Ok(())
    }
}

fn moves_for(grid: &GridSpec, actions: &[Action2]) -> Vec<Move> {
    actions
        .iter()
        .map(|a| {
            let fx = a.dx / grid.h;
            let fy = a.dy / grid.h;
            if (fx - fx.round()).abs() < 1e-12 && (fy - fy.round()).abs() < 1e-12 {
                Move::Shift(fx.round() as isize, fy.round() as isize)
            } else {
                Move::Offset(*a)
            }
        })
        .collect()
}

fn arrival_rewards(grid: &GridSpec, env: &EnvSpec) -> Vec<f64> {
    (0..grid.len()).map(|i| env.reward.value(&grid.node_at(i))).collect()
}

fn backup(
    grid: &GridSpec,
    env: &EnvSpec,
    moves: &[Move],
    node_rewards: &[f64],
    values: &[f64],
    gamma: f64,
) -> (Vec<f64>, Vec<usize>) {
    // For lattice moves the arrival node is exact, so `R + gamma V` can be
    // tabulated once per sweep.
    let node_q: Vec<f64> = node_rewards.iter().zip(values).map(|(r, v)| r + gamma * v).collect();
    let nx = grid.nx as isize;
    let ny = grid.ny as isize;
    (0..grid.len())
        .into_par_iter()
        .map(|i| {
            let ix = (i % grid.nx) as isize;
            let iy = (i / grid.nx) as isize;
            let mut best = f64::NEG_INFINITY;
            let mut arg = 0;
            for (m, mv) in moves.iter().enumerate() {
                let q = match mv {
                    Move::Shift(dx, dy) => {
                        let jx = (ix + dx).clamp(0, nx - 1);
                        let jy = (iy + dy).clamp(0, ny - 1);
                        node_q[(jy * nx + jx) as usize]
                    }
                    Move::Offset(a) => {
                        let s = grid.node_at(i);
                        let next = grid.clamp(&State2::new(s.x + a.dx, s.y + a.dy));
                        env.reward.value(&next) + gamma * grid.interpolate(values, &next)
                    }
                };
                if q > best {
                    best = q;
                    arg = m;
                }
            }
            (best, arg)
        })
        .unzip()
}

/// Value iteration for the deterministic point mass on `grid`, actions from
/// an `n x n` lattice. Moves that would leave the box stop at its boundary.
pub fn value_iteration(env: &EnvSpec, grid: GridSpec, cfg: &DpConfig) -> Result<ValueGrid, AnalysisError> {
    if !(cfg.tol > 0.0) {
        return Err(AnalysisError::Invalid(format!("tolerance must be positive, got {}", cfg.tol)));
    }
    if cfg.actions_per_axis == 0 {
        return Err(AnalysisError::Invalid("need at least one action per axis".into()));
    }
    env.validate().map_err(|e| AnalysisError::Invalid(e.to_string()))?;
    let actions = action_lattice(env.a_max, cfg.actions_per_axis);
    let moves = moves_for(&grid, &actions);
    let rewards = arrival_rewards(&grid, env);
    let mut values = vec![0.0; grid.len()];
    let mut residual = f64::INFINITY;
    for it in 1..=cfg.max_iterations {
        let (next, arg) = backup(&grid, env, &moves, &rewards, &values, env.gamma);
        residual = next
            .iter()
            .zip(&values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        values = next;
        if residual < cfg.tol {
            return Ok(ValueGrid {
                grid,
                greedy: arg.iter().map(|&m| actions[m]).collect(),
                values,
                actions,
                gamma: env.gamma,
                residual,
                iterations: it,
            });
        }
    }
    Err(AnalysisError::NoConvergence {
        iterations: cfg.max_iterations,
        residual,
    })
}

/// Value iteration on the default lattice for `env`.
pub fn oracle_values(env: &EnvSpec, cfg: &DpConfig) -> Result<ValueGrid, AnalysisError> {
    value_iteration(env, GridSpec::default_for(env, cfg.h)?, cfg)
}
