//! Dense feed-forward networks with exact reverse-mode gradients.
//!
//! Parameters are `f64` throughout. Weight matrices are stored `out x in`;
//! batches are row-major with one sample per row, so a layer computes
//! `act(X Wᵀ + b)`.

mod io;
mod train;

pub use io::{read_mlp, write_mlp};
pub use train::{full_batch_loss, mse_loss, train, Pairs, TrainConfig, TrainingData};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
            Activation::Softplus => z.max(0.0) + (-z.abs()).exp().ln_1p(),
        }
    }

    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
            Activation::Softplus => 1.0 / (1.0 + (-z).exp()),
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Identity => 1,
            Activation::Softplus => 2,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Relu),
            1 => Some(Activation::Identity),
            2 => Some(Activation::Softplus),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Dense>,
}

/// Parameter gradients, shaped like the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &Mlp) -> Self {
        Self {
            weights: net.layers.iter().map(|l| Array2::zeros(l.weights.raw_dim())).collect(),
            biases: net.layers.iter().map(|l| Array1::zeros(l.bias.raw_dim())).collect(),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| w.iter().chain(b.iter()).copied())
    }
}

/// Activations kept from a batch forward pass for backpropagation.
struct Trace {
    /// Input to each layer (`inputs[0]` is the batch itself).
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each layer.
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// Random initialisation: He-normal for ReLU layers, `1/fan_in` variance
    /// otherwise; zero biases.
    ///
    /// `widths` lists the input width followed by each layer's output width;
    /// `activations` has one entry per layer.
    pub fn new<R: Rng + ?Sized>(widths: &[usize], activations: &[Activation], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "need at least an input and an output width");
        assert_eq!(activations.len(), widths.len() - 1, "one activation per layer");
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
                let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("finite std");
                let weights = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(rng));
                Dense { weights, bias: Array1::zeros(fan_out), activation }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros(widths: &[usize], activations: &[Activation]) -> Self {
        assert_eq!(activations.len(), widths.len() - 1, "one activation per layer");
        let layers = widths
            .windows(2)
            .zip(activations)
            .map(|(w, &activation)| Dense {
                weights: Array2::zeros((w[1], w[0])),
                bias: Array1::zeros(w[1]),
                activation,
            })
            .collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Invalid("network needs at least one layer".into()));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::Shape { expected: pair[0].out_dim(), found: pair[1].in_dim() });
            }
        }
        for l in &layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape { expected: l.out_dim(), found: l.bias.len() });
            }
            if l.weights.iter().chain(l.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Invalid("non-finite parameter".into()));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim()
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim())
            .chain(self.layers.iter().map(Dense::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// All parameters in layer order, weights (row-major) before biases.
    pub fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.layers.iter().flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
    }

    /// Mutable access to the `k`-th parameter in [`Mlp::params`] order.
    pub fn param_mut(&mut self, mut k: usize) -> &mut f64 {
        for l in &mut self.layers {
            if k < l.weights.len() {
                let cols = l.weights.ncols();
                return &mut l.weights[(k / cols, k % cols)];
            }
            k -= l.weights.len();
            if k < l.bias.len() {
                return &mut l.bias[k];
            }
            k -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| Error::Shape { expected: self.input_dim(), found: input.len() })?;
        Ok(self.forward_batch(x)?.into_raw_vec_and_offset().0)
    }

    /// One sample per row.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weights.t());
            z += &l.bias;
            let act = l.activation;
            z.mapv_inplace(|v| act.apply(v));
            a = z;
        }
        Ok(a)
    }

    fn forward_trace(&self, x: ArrayView2<f64>) -> Result<(Array2<f64>, Trace)> {
        self.check_input(x.ncols())?;
        let mut trace = Trace { inputs: Vec::with_capacity(self.layers.len()), pre: Vec::new() };
        let mut a = x.to_owned();
        for l in &self.layers {
            let mut z = a.dot(&l.weights.t());
            z += &l.bias;
            let act = l.activation;
            let out = z.mapv(|v| act.apply(v));
            trace.inputs.push(a);
            trace.pre.push(z);
            a = out;
        }
        Ok((a, trace))
    }

    /// Gradients for a single sample given dLoss/dOutput.
    pub fn backward(&self, input: &[f64], loss_grad: &[f64]) -> Result<Gradients> {
        let x = ArrayView2::from_shape((1, input.len()), input)
            .map_err(|_| Error::Shape { expected: self.input_dim(), found: input.len() })?;
        let g = ArrayView2::from_shape((1, loss_grad.len()), loss_grad)
            .map_err(|_| Error::Shape { expected: self.output_dim(), found: loss_grad.len() })?;
        self.backward_batch(x, g)
    }

    /// Gradients summed over the rows of a batch.
    pub fn backward_batch(&self, x: ArrayView2<f64>, loss_grad: ArrayView2<f64>) -> Result<Gradients> {
        let (_, trace) = self.forward_trace(x)?;
        self.backward_from(&trace, loss_grad)
    }

    fn backward_from(&self, trace: &Trace, loss_grad: ArrayView2<f64>) -> Result<Gradients> {
        if loss_grad.ncols() != self.output_dim() {
            return Err(Error::Shape { expected: self.output_dim(), found: loss_grad.ncols() });
        }
        if loss_grad.nrows() != trace.inputs[0].nrows() {
            return Err(Error::Shape { expected: trace.inputs[0].nrows(), found: loss_grad.nrows() });
        }
        let n = self.layers.len();
        let mut grads = Gradients::zeros_like(self);
        let mut delta = loss_grad.to_owned();
        for li in (0..n).rev() {
            let l = &self.layers[li];
            let act = l.activation;
            delta.zip_mut_with(&trace.pre[li], |d, &z| *d *= act.derivative(z));
            grads.weights[li] = delta.t().dot(&trace.inputs[li]);
            grads.biases[li] = delta.sum_axis(Axis(0));
            if li > 0 {
                delta = delta.dot(&l.weights);
            }
        }
        Ok(grads)
    }

    fn check_input(&self, found: usize) -> Result<()> {
        if found != self.input_dim() {
            return Err(Error::Shape { expected: self.input_dim(), found });
        }
        Ok(())
    }
}
