//! Small multilayer perceptrons with hand-written reverse-mode gradients,
//! stacked ensembles, an Adam optimiser, and a flat checkpoint format.
//!
//! Every trainable object exposes its parameters as named flat blocks through
//! [`Parameters`]. Gradients are stored in a value of the same type, so the
//! optimiser, Polyak averaging, and checkpointing only ever walk block lists.

mod adam;
mod checkpoint;
mod ensemble;
mod mlp;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, BlockEntry, Manifest};
pub use ensemble::EnsembleMlp;
pub use mlp::{split_gaussian, GaussianOut, Head, Mlp, MlpGradMut, MlpRef, Tape};

use ndarray::Array1;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ApproxError {
    #[error("shape mismatch: expected width {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("tape was not recorded by this network")]
    TapeMismatch,
    #[error("non-finite gradient in parameter block `{block}`")]
    NonFiniteGradient { block: String },
    #[error("parameter blocks disagree: {0}")]
    BlockMismatch(String),
    #[error("an ensemble needs at least one member")]
    EmptyEnsemble,
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub struct ParamBlock<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub struct ParamBlockMut<'a> {
    pub name: String,
    pub data: &'a mut [f64],
}

/// Named, ordered access to every trainable parameter.
pub trait Parameters {
    fn param_blocks(&self) -> Vec<ParamBlock<'_>>;
    fn param_blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>>;

    fn num_params(&self) -> usize {
        self.param_blocks().iter().map(|b| b.data.len()).sum()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.param_blocks()
            .iter()
            .flat_map(|b| b.data.iter().copied())
            .collect()
    }
}

impl Parameters for Array1<f64> {
    fn param_blocks(&self) -> Vec<ParamBlock<'_>> {
        vec![ParamBlock {
            name: "value".into(),
            shape: vec![self.len()],
            data: self.as_slice().expect("standard layout"),
        }]
    }

    fn param_blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        vec![ParamBlockMut {
            name: "value".into(),
            data: self.as_slice_mut().expect("standard layout"),
        }]
    }
}

/// `target <- (1 - tau) * target + tau * online`, block by block.
pub fn polyak_update<P: Parameters>(target: &mut P, online: &P, tau: f64) {
    let src = online.param_blocks();
    for (dst, src) in target.param_blocks_mut().into_iter().zip(src) {
        for (t, &o) in dst.data.iter_mut().zip(src.data) {
            *t = (1.0 - tau) * *t + tau * o;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn polyak_step_is_exact_convex_combination() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let online = EnsembleMlp::new(3, &[4, 8, 1], &mut rng);
        let old = EnsembleMlp::new(3, &[4, 8, 1], &mut rng);
        let mut target = old.clone();
        let tau = 0.005;
        polyak_update(&mut target, &online, tau);
        for ((t, o), n) in target
            .flat_params()
            .iter()
            .zip(old.flat_params())
            .zip(online.flat_params())
        {
            assert_eq!(*t, (1.0 - tau) * o + tau * n);
        }
    }
}
