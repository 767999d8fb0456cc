use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use super::{ApproxError, ParamBlock, ParamBlockMut, Parameters};

/// Recorded activations of one forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// Input to each layer (row-major batch).
    pub(crate) inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer. The last entry is the network output.
    pub(crate) pre: Vec<Array2<f64>>,
}

impl Tape {
    pub fn output(&self) -> &Array2<f64> {
        self.pre.last().expect("tape has at least one layer")
    }

    pub fn batch_len(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Borrowed view of a single network's parameters. Plain networks and
/// stacked ensembles both evaluate through this type, so a member evaluated
/// inside an ensemble runs the exact same arithmetic as a standalone net.
#[derive(Debug, Clone)]
pub struct MlpRef<'a> {
    pub(crate) weights: Vec<ArrayView2<'a, f64>>,
    pub(crate) biases: Vec<ArrayView1<'a, f64>>,
}

/// Mutable gradient accumulator matching an [`MlpRef`].
pub struct MlpGradMut<'a> {
    pub(crate) weights: Vec<ArrayViewMut2<'a, f64>>,
    pub(crate) biases: Vec<ArrayViewMut1<'a, f64>>,
}

fn relu_inplace(z: &mut Array2<f64>) {
    z.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

fn relu_mask_inplace(grad: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(grad).and(pre).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
}

impl<'a> MlpRef<'a> {
    pub fn depth(&self) -> usize {
        self.weights.len()
    }

    pub fn in_dim(&self) -> usize {
        self.weights[0].nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weights[self.depth() - 1].ncols()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<(), ApproxError> {
        if x.ncols() != self.in_dim() {
            return Err(ApproxError::Shape {
                expected: self.in_dim(),
                got: x.ncols(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, ApproxError> {
        self.check_input(&x)?;
        let last = self.depth() - 1;
        let mut h = x.to_owned();
        for l in 0..self.depth() {
            let mut z = h.dot(&self.weights[l]);
            z += &self.biases[l];
            if l < last {
                relu_inplace(&mut z);
            }
            h = z;
        }
        Ok(h)
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<Tape, ApproxError> {
        self.check_input(&x)?;
        let last = self.depth() - 1;
        let mut inputs = Vec::with_capacity(self.depth());
        let mut pre = Vec::with_capacity(self.depth());
        let mut h = x.to_owned();
        for l in 0..self.depth() {
            let mut z = h.dot(&self.weights[l]);
            z += &self.biases[l];
            inputs.push(h);
            h = if l < last {
                let mut a = z.clone();
                relu_inplace(&mut a);
                a
            } else {
                Array2::zeros((0, 0))
            };
            pre.push(z);
        }
        Ok(Tape { inputs, pre })
    }

    fn check_tape(&self, tape: &Tape, dout: &ArrayView2<f64>) -> Result<(), ApproxError> {
        if tape.pre.len() != self.depth()
            || tape.inputs.iter().zip(&self.weights).any(|(i, w)| i.ncols() != w.nrows())
        {
            return Err(ApproxError::TapeMismatch);
        }
        if dout.dim() != tape.output().dim() {
            return Err(ApproxError::Shape {
                expected: tape.output().ncols(),
                got: dout.ncols(),
            });
        }
        Ok(())
    }

    /// Reverse pass. Accumulates (adds) parameter gradients into `grads`
    /// when given, and returns the cotangent of the input batch.
    pub fn backward(
        &self,
        tape: &Tape,
        dout: ArrayView2<f64>,
        grads: Option<&mut MlpGradMut<'_>>,
    ) -> Result<Array2<f64>, ApproxError> {
        let (_, dinput) = self.backward_inner(tape, dout, grads, false)?;
        Ok(dinput)
    }

    /// Reverse pass that also returns the cotangent of every pre-activation.
    pub fn backward_deltas(
        &self,
        tape: &Tape,
        dout: ArrayView2<f64>,
    ) -> Result<(Vec<Array2<f64>>, Array2<f64>), ApproxError> {
        self.backward_inner(tape, dout, None, true)
    }

    fn backward_inner(
        &self,
        tape: &Tape,
        dout: ArrayView2<f64>,
        mut grads: Option<&mut MlpGradMut<'_>>,
        keep_deltas: bool,
    ) -> Result<(Vec<Array2<f64>>, Array2<f64>), ApproxError> {
        self.check_tape(tape, &dout)?;
        let mut deltas = Vec::new();
        let mut delta = dout.to_owned();
        for l in (0..self.depth()).rev() {
            if let Some(g) = grads.as_deref_mut() {
                g.weights[l] += &tape.inputs[l].t().dot(&delta);
                g.biases[l] += &delta.sum_axis(Axis(0));
            }
            let mut dh = delta.dot(&self.weights[l].t());
            if keep_deltas {
                deltas.push(delta);
            }
            if l > 0 {
                relu_mask_inplace(&mut dh, &tape.pre[l - 1]);
            }
            delta = dh;
        }
        deltas.reverse();
        Ok((deltas, delta))
    }

    /// Parameter gradient of `sum_b <tangent_b, d out_b / d input_b>`, with
    /// `deltas` the pre-activation cotangents of the output (from
    /// [`MlpRef::backward_deltas`]). ReLU masks are piecewise constant, so the
    /// input-gradient is multilinear in the weights and bias gradients vanish.
    pub fn accumulate_input_gradient_grads(
        &self,
        tape: &Tape,
        deltas: &[Array2<f64>],
        tangent: ArrayView2<f64>,
        grads: &mut MlpGradMut<'_>,
    ) -> Result<(), ApproxError> {
        if deltas.len() != self.depth() || tangent.dim() != tape.inputs[0].dim() {
            return Err(ApproxError::TapeMismatch);
        }
        let last = self.depth() - 1;
        let mut h_dot = tangent.to_owned();
        for l in 0..self.depth() {
            grads.weights[l] += &h_dot.t().dot(&deltas[l]);
            if l < last {
                let mut z_dot = h_dot.dot(&self.weights[l]);
                relu_mask_inplace(&mut z_dot, &tape.pre[l]);
                h_dot = z_dot;
            }
        }
        Ok(())
    }
}

/// Output head interpretation of the final layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Head {
    Identity,
    /// First half of the outputs is a mean, second half a log standard
    /// deviation clamped to `[log_std_min, log_std_max]`.
    Gaussian { log_std_min: f64, log_std_max: f64 },
}

impl Head {
    pub const DEFAULT_GAUSSIAN: Head = Head::Gaussian {
        log_std_min: -20.0,
        log_std_max: 2.0,
    };
}

/// Split of a Gaussian head's raw output.
#[derive(Debug, Clone)]
pub struct GaussianOut {
    pub mean: Array2<f64>,
    pub log_std: Array2<f64>,
    /// 1.0 where the raw log-std was inside the clamp range, else 0.0.
    pub log_std_pass: Array2<f64>,
}

pub fn split_gaussian(raw: &Array2<f64>, log_std_min: f64, log_std_max: f64) -> GaussianOut {
    let d = raw.ncols() / 2;
    let mean = raw.slice(ndarray::s![.., ..d]).to_owned();
    let raw_ls = raw.slice(ndarray::s![.., d..]);
    let log_std = raw_ls.mapv(|v| v.clamp(log_std_min, log_std_max));
    let log_std_pass = raw_ls.mapv(|v| {
        if (log_std_min..=log_std_max).contains(&v) {
            1.0
        } else {
            0.0
        }
    });
    GaussianOut {
        mean,
        log_std,
        log_std_pass,
    }
}

/// Multilayer perceptron with ReLU hidden activations.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    head: Head,
}

impl Mlp {
    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation for weights and biases.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], head: Head, rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an MLP needs input and output widths");
        assert!(widths.iter().all(|&w| w > 0), "layer widths must be positive");
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in widths.windows(2) {
            let bound = 1.0 / (pair[0] as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            weights.push(Array2::from_shape_fn((pair[0], pair[1]), |_| dist.sample(rng)));
            biases.push(Array1::from_shape_fn(pair[1], |_| dist.sample(rng)));
        }
        Self {
            widths: widths.to_vec(),
            weights,
            biases,
            head,
        }
    }

    pub fn zeros(widths: &[usize], head: Head) -> Self {
        let weights = widths
            .windows(2)
            .map(|p| Array2::zeros((p[0], p[1])))
            .collect();
        let biases = widths.windows(2).map(|p| Array1::zeros(p[1])).collect();
        Self {
            widths: widths.to_vec(),
            weights,
            biases,
            head,
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn in_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn weights_mut(&mut self, layer: usize) -> &mut Array2<f64> {
        &mut self.weights[layer]
    }

    pub fn biases_mut(&mut self, layer: usize) -> &mut Array1<f64> {
        &mut self.biases[layer]
    }

    pub fn weights(&self, layer: usize) -> &Array2<f64> {
        &self.weights[layer]
    }

    pub fn view(&self) -> MlpRef<'_> {
        MlpRef {
            weights: self.weights.iter().map(|w| w.view()).collect(),
            biases: self.biases.iter().map(|b| b.view()).collect(),
        }
    }

    pub fn grad_view(&mut self) -> MlpGradMut<'_> {
        MlpGradMut {
            weights: self.weights.iter_mut().map(|w| w.view_mut()).collect(),
            biases: self.biases.iter_mut().map(|b| b.view_mut()).collect(),
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>, ApproxError> {
        self.view().forward(x)
    }

    pub fn forward_tape(&self, x: ArrayView2<f64>) -> Result<Tape, ApproxError> {
        self.view().forward_tape(x)
    }

    /// Gradients of a scalar loss whose cotangent w.r.t. the raw output is `dout`.
    pub fn backward(
        &self,
        tape: &Tape,
        dout: ArrayView2<f64>,
    ) -> Result<(Mlp, Array2<f64>), ApproxError> {
        let mut grads = self.zeros_like();
        let dinput = self.view().backward(tape, dout, Some(&mut grads.grad_view()))?;
        Ok((grads, dinput))
    }

    pub fn zeros_like(&self) -> Mlp {
        Mlp::zeros(&self.widths, self.head)
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }
}

impl Parameters for Mlp {
    fn param_blocks(&self) -> Vec<ParamBlock<'_>> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push(ParamBlock {
                name: format!("layers.{l}.weight"),
                shape: w.shape().to_vec(),
                data: w.as_slice().expect("standard layout"),
            });
            out.push(ParamBlock {
                name: format!("layers.{l}.bias"),
                shape: b.shape().to_vec(),
                data: b.as_slice().expect("standard layout"),
            });
        }
        out
    }

    fn param_blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (l, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push(ParamBlockMut {
                name: format!("layers.{l}.weight"),
                data: w.as_slice_mut().expect("standard layout"),
            });
            out.push(ParamBlockMut {
                name: format!("layers.{l}.bias"),
                data: b.as_slice_mut().expect("standard layout"),
            });
        }
        out
    }
}
