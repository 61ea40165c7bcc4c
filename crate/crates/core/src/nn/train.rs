use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;

use super::{Gradients, Mlp, Optimizer};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, SimRng};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
}

/// Source of training batches. Implementations may randomise each draw
/// (e.g. augmentation) using the supplied rng.
pub trait TrainingData {
    fn len(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    /// Writes the samples `indices` into the rows of `inputs` and `targets`.
    fn fill_batch(
        &self,
        indices: &[usize],
        rng: &mut SimRng,
        inputs: &mut Array2<f64>,
        targets: &mut Array2<f64>,
    );

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed `(input, target)` pairs, one per row.
#[derive(Debug, Clone)]
pub struct Pairs {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
}

impl TrainingData for Pairs {
    fn len(&self) -> usize {
        self.inputs.nrows()
    }

    fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    fn output_dim(&self) -> usize {
        self.targets.ncols()
    }

    fn fill_batch(
        &self,
        indices: &[usize],
        _rng: &mut SimRng,
        inputs: &mut Array2<f64>,
        targets: &mut Array2<f64>,
    ) {
        for (row, &i) in indices.iter().enumerate() {
            inputs.row_mut(row).assign(&self.inputs.row(i));
            targets.row_mut(row).assign(&self.targets.row(i));
        }
    }
}

/// Mean squared error and its gradient with respect to `pred`.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if pred.len() != target.len() {
        return Err(Error::Shape { expected: pred.len(), found: target.len() });
    }
    if pred.is_empty() {
        return Ok((0.0, Vec::new()));
    }
    let n = pred.len() as f64;
    let loss = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / n;
    let grad = pred.iter().zip(target).map(|(p, t)| 2.0 * (p - t) / n).collect();
    Ok((loss, grad))
}

struct Adam {
    m: Gradients,
    v: Gradients,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(net: &Mlp) -> Self {
        Self { m: Gradients::zeros_like(net), v: Gradients::zeros_like(net), t: 0 }
    }

    fn step(&mut self, net: &mut Mlp, g: &Gradients, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t);
        let c2 = 1.0 - BETA2.powi(self.t);
        let update = |p: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        };
        for (li, layer) in net.layers_mut().iter_mut().enumerate() {
            ndarray::Zip::from(&mut layer.weights)
                .and(&mut self.m.weights[li])
                .and(&mut self.v.weights[li])
                .and(&g.weights[li])
                .for_each(|p, m, v, &g| update(p, m, v, g));
            ndarray::Zip::from(&mut layer.bias)
                .and(&mut self.m.biases[li])
                .and(&mut self.v.biases[li])
                .and(&g.biases[li])
                .for_each(|p, m, v, &g| update(p, m, v, g));
        }
    }
}

fn sgd_step(net: &mut Mlp, g: &Gradients, lr: f64) {
    for (li, layer) in net.layers_mut().iter_mut().enumerate() {
        layer.weights.scaled_add(-lr, &g.weights[li]);
        layer.bias.scaled_add(-lr, &g.biases[li]);
    }
}

/// Mean-squared-error training over shuffled mini-batches.
///
/// Returns the mean training loss of each epoch. Deterministic for a given
/// `cfg.seed`. A non-finite loss aborts with [`Error::Diverged`].
pub fn train(net: &mut Mlp, data: &dyn TrainingData, cfg: &TrainConfig) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(Error::Invalid("no training data".into()));
    }
    if !(cfg.learning_rate > 0.0) || cfg.batch_size == 0 {
        return Err(Error::Invalid("learning rate must be > 0 and batch size >= 1".into()));
    }
    if data.input_dim() != net.input_dim() {
        return Err(Error::Shape { expected: net.input_dim(), found: data.input_dim() });
    }
    if data.output_dim() != net.output_dim() {
        return Err(Error::Shape { expected: net.output_dim(), found: data.output_dim() });
    }

    let mut rng = stream_rng(cfg.seed, 0);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut adam = match cfg.optimizer {
        Optimizer::Adam => Some(Adam::new(net)),
        Optimizer::Sgd => None,
    };
    let d_out = data.output_dim();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            let mut x = Array2::zeros((b, data.input_dim()));
            let mut t = Array2::zeros((b, d_out));
            data.fill_batch(chunk, &mut rng, &mut x, &mut t);
            let (pred, trace) = net.forward_trace(x.view())?;
            let diff = &pred - &t;
            let scale = (b * d_out) as f64;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / scale;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss * b as f64;
            let grad = diff.mapv(|d| 2.0 * d / scale);
            let g = net.backward_from(&trace, grad.view())?;
            match adam.as_mut() {
                Some(a) => a.step(net, &g, cfg.learning_rate),
                None => sgd_step(net, &g, cfg.learning_rate),
            }
        }
        curve.push(epoch_loss / data.len() as f64);
    }
    Ok(curve)
}

/// Mean squared error of `net` over a full set of pairs.
pub fn full_batch_loss(net: &Mlp, inputs: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<f64> {
    let pred = net.forward_batch(inputs)?;
    let diff = pred - targets;
    Ok(diff.iter().map(|d| d * d).sum::<f64>() / diff.len().max(1) as f64)
}
