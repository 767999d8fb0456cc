use ndarray::{Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::mlp::{MlpGradMut, MlpRef, Tape};
use super::{ApproxError, Mlp, ParamBlock, ParamBlockMut, Parameters};

/// `N` networks of identical architecture with parameters stacked along a
/// leading member axis. Weight block `l` has shape `[N, in_l, out_l]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMlp {
    widths: Vec<usize>,
    weights: Vec<Array3<f64>>,
    biases: Vec<Array2<f64>>,
}

impl EnsembleMlp {
    pub fn new<R: Rng + ?Sized>(members: usize, widths: &[usize], rng: &mut R) -> Self {
        assert!(members >= 1);
        let mut out = Self::zeros(members, widths);
        for i in 0..members {
            for (l, pair) in widths.windows(2).enumerate() {
                let bound = 1.0 / (pair[0] as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                out.weights[l]
                    .index_axis_mut(Axis(0), i)
                    .mapv_inplace(|_| dist.sample(rng));
                out.biases[l]
                    .index_axis_mut(Axis(0), i)
                    .mapv_inplace(|_| dist.sample(rng));
            }
        }
        out
    }

    pub fn zeros(members: usize, widths: &[usize]) -> Self {
        assert!(widths.len() >= 2);
        Self {
            widths: widths.to_vec(),
            weights: widths
                .windows(2)
                .map(|p| Array3::zeros((members, p[0], p[1])))
                .collect(),
            biases: widths
                .windows(2)
                .map(|p| Array2::zeros((members, p[1])))
                .collect(),
        }
    }

    /// Stacks independent networks. All must share the same widths.
    pub fn from_members(nets: &[Mlp]) -> Result<Self, ApproxError> {
        let first = nets.first().ok_or(ApproxError::EmptyEnsemble)?;
        let mut out = Self::zeros(nets.len(), first.widths());
        for (i, net) in nets.iter().enumerate() {
            if net.widths() != first.widths() {
                return Err(ApproxError::Shape {
                    expected: first.param_count(),
                    got: net.param_count(),
                });
            }
            out.set_member(i, net);
        }
        Ok(out)
    }

    pub fn set_member(&mut self, i: usize, net: &Mlp) {
        let view = net.view();
        for l in 0..self.weights.len() {
            self.weights[l].index_axis_mut(Axis(0), i).assign(&view.weights[l]);
            self.biases[l].index_axis_mut(Axis(0), i).assign(&view.biases[l]);
        }
    }

    pub fn member_mlp(&self, i: usize) -> Mlp {
        let mut net = Mlp::zeros(&self.widths, super::Head::Identity);
        for l in 0..self.weights.len() {
            net.weights_mut(l).assign(&self.weights[l].index_axis(Axis(0), i));
            net.biases_mut(l).assign(&self.biases[l].index_axis(Axis(0), i));
        }
        net
    }

    pub fn len(&self) -> usize {
        self.weights[0].len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn member(&self, i: usize) -> MlpRef<'_> {
        MlpRef {
            weights: self.weights.iter().map(|w| w.index_axis(Axis(0), i)).collect(),
            biases: self.biases.iter().map(|b| b.index_axis(Axis(0), i)).collect(),
        }
    }

    /// Gradient views for every member, for accumulation in a single pass.
    pub fn grad_views(&mut self) -> Vec<MlpGradMut<'_>> {
        let n = self.len();
        let mut per_member: Vec<MlpGradMut<'_>> = (0..n)
            .map(|_| MlpGradMut {
                weights: Vec::new(),
                biases: Vec::new(),
            })
            .collect();
        for w in self.weights.iter_mut() {
            for (i, v) in w.outer_iter_mut().enumerate() {
                per_member[i].weights.push(v);
            }
        }
        for b in self.biases.iter_mut() {
            for (i, v) in b.outer_iter_mut().enumerate() {
                per_member[i].biases.push(v);
            }
        }
        per_member
    }

    /// Evaluates every member on the shared input batch; result is `[N, B, out]`.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array3<f64>, ApproxError> {
        let n = self.len();
        let mut out = Array3::zeros((n, x.nrows(), self.out_dim()));
        for i in 0..n {
            out.index_axis_mut(Axis(0), i)
                .assign(&self.member(i).forward(x)?);
        }
        Ok(out)
    }

    pub fn forward_tapes(&self, x: ArrayView2<f64>) -> Result<Vec<Tape>, ApproxError> {
        (0..self.len())
            .map(|i| self.member(i).forward_tape(x))
            .collect()
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.len(), &self.widths)
    }

    /// Copies member `src` over every other member.
    pub fn tie_to_member(&mut self, src: usize) {
        for l in 0..self.weights.len() {
            let w = self.weights[l].index_axis(Axis(0), src).to_owned();
            let b = self.biases[l].index_axis(Axis(0), src).to_owned();
            for mut m in self.weights[l].outer_iter_mut() {
                m.assign(&w);
            }
            for mut m in self.biases[l].outer_iter_mut() {
                m.assign(&b);
            }
        }
    }
}

impl Parameters for EnsembleMlp {
    fn param_blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = Vec::new();
        for i in 0..self.len() {
            for l in 0..self.weights.len() {
                let w = self.weights[l].index_axis(Axis(0), i);
                let b = self.biases[l].index_axis(Axis(0), i);
                out.push(ParamBlock {
                    name: format!("members.{i}.layers.{l}.weight"),
                    shape: w.shape().to_vec(),
                    data: w.to_slice().expect("standard layout"),
                });
                out.push(ParamBlock {
                    name: format!("members.{i}.layers.{l}.bias"),
                    shape: b.shape().to_vec(),
                    data: b.to_slice().expect("standard layout"),
                });
            }
        }
        out
    }

    fn param_blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        let n = self.len();
        let depth = self.weights.len();
        let mut slots: Vec<Option<ParamBlockMut<'_>>> = (0..n * depth * 2).map(|_| None).collect();
        for (l, w) in self.weights.iter_mut().enumerate() {
            for (i, v) in w.outer_iter_mut().enumerate() {
                slots[(i * depth + l) * 2] = Some(ParamBlockMut {
                    name: format!("members.{i}.layers.{l}.weight"),
                    data: v.into_slice().expect("standard layout"),
                });
            }
        }
        for (l, b) in self.biases.iter_mut().enumerate() {
            for (i, v) in b.outer_iter_mut().enumerate() {
                slots[(i * depth + l) * 2 + 1] = Some(ParamBlockMut {
                    name: format!("members.{i}.layers.{l}.bias"),
                    data: v.into_slice().expect("standard layout"),
                });
            }
        }
        slots.into_iter().map(|s| s.expect("every slot filled")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stacked_evaluation_equals_sequential() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let nets: Vec<Mlp> = (0..5)
            .map(|_| Mlp::new(&[4, 32, 32, 3], super::super::Head::Identity, &mut rng))
            .collect();
        let ens = EnsembleMlp::from_members(&nets).unwrap();
        let x = Array2::from_shape_fn((17, 4), |_| rng.random_range(-3.0..3.0));
        let stacked = ens.forward(x.view()).unwrap();
        for (i, net) in nets.iter().enumerate() {
            let single = net.forward(x.view()).unwrap();
            assert_eq!(stacked.index_axis(Axis(0), i), single, "member {i}");
        }
    }

    #[test]
    fn block_order_is_member_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ens = EnsembleMlp::new(3, &[2, 4, 1], &mut rng);
        let names: Vec<String> = ens.param_blocks().into_iter().map(|b| b.name).collect();
        let names_mut: Vec<String> = ens.param_blocks_mut().into_iter().map(|b| b.name).collect();
        assert_eq!(names, names_mut);
        assert_eq!(names[0], "members.0.layers.0.weight");
        assert_eq!(names[4], "members.1.layers.0.weight");
    }

    #[test]
    fn tied_members_are_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ens = EnsembleMlp::new(4, &[3, 8, 2], &mut rng);
        ens.tie_to_member(2);
        assert_eq!(ens.member_mlp(0), ens.member_mlp(3));
    }
}
