//! Truncated model rollouts, epoch-retained replay, and real/synthetic batch
//! mixing.

use std::collections::VecDeque;
use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{penalized_predict_batch, DynamicsError, DynamicsModel, Penalty};
use crate::env2d::{Action2, State2};
use crate::LabRng;

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("rollout length must be at least 1")]
    ZeroLength,
    #[error("start-state pool is empty")]
    EmptyPool,
    #[error("mixing ratio {0} is outside [0, 1]")]
    BadRatio(f64),
    #[error("the {0} source is empty but the mixing ratio draws from it")]
    EmptySource(&'static str),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("buffer csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub epoch: u32,
    pub traj: u32,
    pub step_index: u32,
    pub s: State2,
    pub a: Action2,
    pub r: f64,
    pub s_next: State2,
    pub done: bool,
}

/// Anything that can emit actions for a batch of states.
pub trait ActionSource {
    fn sample_actions(&self, states: &[State2], rng: &mut LabRng) -> Vec<Action2>;
}

/// Fixed action regardless of state.
pub struct ConstantAction(pub Action2);

impl ActionSource for ConstantAction {
    fn sample_actions(&self, states: &[State2], _rng: &mut LabRng) -> Vec<Action2> {
        vec![self.0; states.len()]
    }
}

#[derive(Debug, Clone, Default)]
pub struct RolloutBatch {
    pub transitions: Vec<Transition>,
    /// Trajectories cut short by a non-finite model prediction.
    pub aborted: Vec<u32>,
    /// Uncertainty penalty subtracted from each transition's reward.
    pub penalties: Vec<f64>,
}

/// Generates `count` trajectories of exactly `k` steps (unless aborted),
/// each starting from a state drawn uniformly from `starts`. All
/// trajectories advance together so the model sees one batch per step.
#[allow(clippy::too_many_arguments)]
pub fn collect_rollouts(
    model: &DynamicsModel,
    penalty: Option<Penalty>,
    policy: &dyn ActionSource,
    starts: &[State2],
    k: usize,
    count: usize,
    epoch: u32,
    rng: &mut LabRng,
) -> Result<RolloutBatch, RolloutError> {
    if k == 0 {
        return Err(RolloutError::ZeroLength);
    }
    if count == 0 {
        return Ok(RolloutBatch::default());
    }
    if starts.is_empty() {
        return Err(RolloutError::EmptyPool);
    }
    let mut live: Vec<u32> = (0..count as u32).collect();
    let mut states: Vec<State2> = (0..count)
        .map(|_| starts[rng.random_range(0..starts.len())])
        .collect();
    let mut out = RolloutBatch::default();
    out.transitions.reserve(count * k);
    for t in 0..k {
        if live.is_empty() {
            break;
        }
        let actions = policy.sample_actions(&states, rng);
        let (preds, pens) = penalized_predict_batch(model, penalty, &states, &actions, rng)?;
        let mut next_live = Vec::with_capacity(live.len());
        let mut next_states = Vec::with_capacity(live.len());
        for (i, &traj) in live.iter().enumerate() {
            let (s_next, r) = preds[i];
            if !(s_next.is_finite() && r.is_finite()) {
                out.aborted.push(traj);
                continue;
            }
            out.transitions.push(Transition {
                epoch,
                traj,
                step_index: t as u32,
                s: states[i],
                a: actions[i],
                r,
                s_next,
                done: false,
            });
            out.penalties.push(pens[i]);
            next_live.push(traj);
            next_states.push(s_next);
        }
        live = next_live;
        states = next_states;
    }
    Ok(out)
}

/// FIFO replay retaining the transitions of the most recent
/// `retain_epochs` insert epochs, bounded by `capacity` transitions.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    retain_epochs: usize,
    chunks: VecDeque<(u32, Vec<Transition>)>,
    len: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, retain_epochs: usize) -> Self {
        Self {
            capacity,
            retain_epochs: retain_epochs.max(1),
            chunks: VecDeque::new(),
            len: 0,
        }
    }

    /// `rollouts_per_epoch * k * retain_epochs`.
    pub fn for_rollouts(rollouts_per_epoch: usize, k: usize, retain_epochs: usize) -> Self {
        Self::new(rollouts_per_epoch * k * retain_epochs, retain_epochs)
    }

    /// A static buffer, e.g. an offline dataset.
    pub fn from_transitions(data: Vec<Transition>) -> Self {
        let len = data.len();
        let mut chunks = VecDeque::new();
        chunks.push_back((0, data));
        Self {
            capacity: len,
            retain_epochs: usize::MAX,
            chunks,
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn insert_epoch(&mut self, epoch: u32, data: Vec<Transition>) {
        self.len += data.len();
        self.chunks.push_back((epoch, data));
        while let Some(&(oldest, _)) = self.chunks.front() {
            if (epoch as usize).saturating_sub(oldest as usize) >= self.retain_epochs {
                let (_, dropped) = self.chunks.pop_front().unwrap();
                self.len -= dropped.len();
            } else {
                break;
            }
        }
        while self.len > self.capacity {
            let front = &mut self.chunks.front_mut().unwrap().1;
            let excess = (self.len - self.capacity).min(front.len());
            front.drain(..excess);
            self.len -= excess;
            if front.is_empty() {
                self.chunks.pop_front();
            }
        }
    }

    pub fn get(&self, mut index: usize) -> &Transition {
        for (_, chunk) in &self.chunks {
            if index < chunk.len() {
                return &chunk[index];
            }
            index -= chunk.len();
        }
        panic!("replay index out of range")
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.chunks.iter().flat_map(|(_, c)| c.iter())
    }

    pub fn sample<'a>(&'a self, n: usize, rng: &mut LabRng, out: &mut Vec<&'a Transition>) {
        for _ in 0..n {
            out.push(self.get(rng.random_range(0..self.len)));
        }
    }

    pub fn oldest_epoch(&self) -> Option<u32> {
        self.chunks.front().map(|c| c.0)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), RolloutError> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(CSV_HEADER)?;
        for t in self.iter() {
            wr.write_record(&[
                t.epoch.to_string(),
                t.traj.to_string(),
                t.step_index.to_string(),
                t.s.x.to_string(),
                t.s.y.to_string(),
                t.a.dx.to_string(),
                t.a.dy.to_string(),
                t.r.to_string(),
                t.s_next.x.to_string(),
                t.s_next.y.to_string(),
                (t.done as u8).to_string(),
            ])?;
        }
        wr.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Reads a dump back as a static buffer.
    pub fn read_csv<R: Read>(r: R) -> Result<Self, RolloutError> {
        let mut rd = csv::Reader::from_reader(r);
        let mut data = Vec::new();
        for rec in rd.deserialize::<CsvRow>() {
            let row = rec?;
            data.push(Transition {
                epoch: row.epoch,
                traj: row.traj,
                step_index: row.step_index,
                s: State2::new(row.s_x, row.s_y),
                a: Action2::new(row.a_dx, row.a_dy),
                r: row.r,
                s_next: State2::new(row.s_next_x, row.s_next_y),
                done: row.done != 0,
            });
        }
        Ok(Self::from_transitions(data))
    }
}

pub const CSV_HEADER: [&str; 11] = [
    "epoch",
    "traj",
    "step_index",
    "s_x",
    "s_y",
    "a_dx",
    "a_dy",
    "r",
    "s_next_x",
    "s_next_y",
    "done",
];

#[derive(Deserialize)]
struct CsvRow {
    epoch: u32,
    traj: u32,
    step_index: u32,
    s_x: f64,
    s_y: f64,
    a_dx: f64,
    a_dy: f64,
    r: f64,
    s_next_x: f64,
    s_next_y: f64,
    done: u8,
}

/// `ceil(ratio * batch_size)` draws from `real`, the rest from `synth`, all
/// uniform with replacement.
pub fn mixed_batch<'a>(
    real: Option<&'a ReplayBuffer>,
    synth: &'a ReplayBuffer,
    ratio: f64,
    batch_size: usize,
    rng: &mut LabRng,
) -> Result<Vec<&'a Transition>, RolloutError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(RolloutError::BadRatio(ratio));
    }
    let n_real = (ratio * batch_size as f64).ceil() as usize;
    let n_synth = batch_size - n_real;
    let mut out = Vec::with_capacity(batch_size);
    if n_real > 0 {
        match real {
            Some(buf) if !buf.is_empty() => buf.sample(n_real, rng, &mut out),
            _ => return Err(RolloutError::EmptySource("real")),
        }
    }
    if n_synth > 0 {
        if synth.is_empty() {
            return Err(RolloutError::EmptySource("synthetic"));
        }
        synth.sample(n_synth, rng, &mut out);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env2d::RewardField;
    use rand::SeedableRng;

    fn true_model() -> DynamicsModel {
        DynamicsModel::True {
            field: RewardField::default(),
            a_max: 1.0,
        }
    }

    struct Jitter;
    impl ActionSource for Jitter {
        fn sample_actions(&self, states: &[State2], rng: &mut LabRng) -> Vec<Action2> {
            states
                .iter()
                .map(|_| Action2::new(rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)))
                .collect()
        }
    }

    #[test]
    fn single_step_rollouts_start_in_pool() {
        let pool = vec![State2::new(1.0, 1.0), State2::new(-1.0, 0.5)];
        let mut rng = LabRng::seed_from_u64(0);
        let b = collect_rollouts(&true_model(), None, &Jitter, &pool, 1, 50, 0, &mut rng).unwrap();
        assert_eq!(b.transitions.len(), 50);
        for t in &b.transitions {
            assert_eq!(t.step_index, 0);
            assert!(pool.contains(&t.s));
        }
    }

    #[test]
    fn constant_policy_walks_right() {
        let pool = vec![State2::new(0.0, 0.0)];
        let mut rng = LabRng::seed_from_u64(0);
        let b = collect_rollouts(&true_model(), None, &ConstantAction(Action2::new(1.0, 0.0)), &pool, 3, 1, 0, &mut rng)
            .unwrap();
        let xs: Vec<f64> = b.transitions.iter().map(|t| t.s.x).chain([b.transitions[2].s_next.x]).collect();
        assert_eq!(xs, vec![0.0, 1.0, 2.0, 3.0]);
        assert!(b.transitions.iter().all(|t| t.s.y == 0.0 && !t.done));
    }

    #[test]
    fn zero_count_is_empty() {
        let mut rng = LabRng::seed_from_u64(0);
        let b = collect_rollouts(&true_model(), None, &Jitter, &[State2::default()], 5, 0, 0, &mut rng).unwrap();
        assert!(b.transitions.is_empty());
    }

    #[test]
    fn empty_pool_and_zero_k_rejected() {
        let mut rng = LabRng::seed_from_u64(0);
        assert!(matches!(
            collect_rollouts(&true_model(), None, &Jitter, &[], 5, 3, 0, &mut rng),
            Err(RolloutError::EmptyPool)
        ));
        assert!(matches!(
            collect_rollouts(&true_model(), None, &Jitter, &[State2::default()], 0, 3, 0, &mut rng),
            Err(RolloutError::ZeroLength)
        ));
    }

    #[test]
    fn final_next_states_never_reappear_as_states() {
        let pool: Vec<State2> = (0..20).map(|i| State2::new(i as f64 * 0.1, 0.0)).collect();
        let mut rng = LabRng::seed_from_u64(3);
        let k = 6;
        let b = collect_rollouts(&true_model(), None, &Jitter, &pool, k, 40, 0, &mut rng).unwrap();
        for last in b.transitions.iter().filter(|t| t.step_index as usize == k - 1) {
            assert!(!b
                .transitions
                .iter()
                .any(|t| t.traj == last.traj && t.s == last.s_next));
        }
    }

    fn dummy(epoch: u32, n: usize) -> Vec<Transition> {
        (0..n)
            .map(|i| Transition {
                epoch,
                traj: i as u32,
                step_index: 0,
                s: State2::default(),
                a: Action2::default(),
                r: 0.0,
                s_next: State2::default(),
                done: false,
            })
            .collect()
    }

    #[test]
    fn buffer_keeps_only_recent_epochs() {
        let mut buf = ReplayBuffer::for_rollouts(4, 2, 5);
        for e in 0..12 {
            buf.insert_epoch(e, dummy(e, 8));
            assert!(buf.len() <= buf.capacity());
        }
        assert_eq!(buf.len(), 40);
        assert!(buf.iter().all(|t| t.epoch >= 7));
    }

    #[test]
    fn mixing_ratio_splits_batch() {
        let real = ReplayBuffer::from_transitions(dummy(100, 10));
        let synth = ReplayBuffer::from_transitions(dummy(1, 10));
        let mut rng = LabRng::seed_from_u64(0);
        let count_real = |b: &Vec<&Transition>| b.iter().filter(|t| t.epoch == 100).count();
        let b = mixed_batch(Some(&real), &synth, 0.5, 256, &mut rng).unwrap();
        assert_eq!((count_real(&b), b.len()), (128, 256));
        let b = mixed_batch(Some(&real), &synth, 0.0, 256, &mut rng).unwrap();
        assert_eq!(count_real(&b), 0);
        let b = mixed_batch(Some(&real), &synth, 1.0, 256, &mut rng).unwrap();
        assert_eq!(count_real(&b), 256);
        let empty = ReplayBuffer::new(10, 1);
        assert!(mixed_batch(None, &synth, 0.05, 256, &mut rng).is_err());
        assert!(mixed_batch(Some(&real), &empty, 0.5, 256, &mut rng).is_err());
    }

    #[test]
    fn csv_dump_round_trips() {
        let pool = vec![State2::new(0.3, -0.2)];
        let mut rng = LabRng::seed_from_u64(9);
        let b = collect_rollouts(&true_model(), None, &Jitter, &pool, 4, 3, 2, &mut rng).unwrap();
        let buf = ReplayBuffer::from_transitions(b.transitions.clone());
        let mut bytes = Vec::new();
        buf.write_csv(&mut bytes).unwrap();
        let back = ReplayBuffer::read_csv(bytes.as_slice()).unwrap();
        assert_eq!(back.iter().copied().collect::<Vec<_>>(), b.transitions);
    }
}
