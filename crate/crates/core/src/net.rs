//! Fully-connected feed-forward network with exact backpropagation.
//!
//! Every layer is the linear map `Z · Θ` on bias-augmented inputs: `Z` carries
//! a trailing constant-one column and the last row of `Θ` is the bias. This is
//! the shape the layerwise preconditioners act on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, Matrix};
use crate::rng::SplitMix64;
use crate::stream::Batch;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `(fan_in + 1) × fan_out`, last row is the bias.
    pub theta: Matrix,
    pub activation: Activation,
    /// Effective activation vectors one exemplar contributes to this layer's
    /// linear map. Always 1 for a fully-connected layer.
    pub n_eff: usize,
}

impl Layer {
    pub fn new(theta: Matrix, activation: Activation) -> Result<Self> {
        if theta.rows() < 1 {
            return Err(Error::Input("layer theta needs at least the bias row".into()));
        }
        Ok(Self {
            theta,
            activation,
            n_eff: 1,
        })
    }

    pub fn with_n_eff(mut self, n_eff: usize) -> Result<Self> {
        if n_eff == 0 {
            return Err(Error::Input("n_eff must be at least 1".into()));
        }
        self.n_eff = n_eff;
        Ok(self)
    }

    pub fn input_width(&self) -> usize {
        self.theta.rows() - 1
    }

    pub fn output_width(&self) -> usize {
        self.theta.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<Layer>,
}

/// Per-layer inputs captured by a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `z[l]` is the bias-augmented input to layer `l`, one row per sample.
    pub z: Vec<Matrix>,
    pub logits: Matrix,
}

impl ForwardTrace {
    /// Input of the last layer without the bias column: the final hidden
    /// representation.
    pub fn last_hidden(&self) -> Matrix {
        self.z.last().expect("non-empty network").without_last_column()
    }
}

/// Gradients shaped like the network's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Matrix>,
}

impl Gradients {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.theta.rows(), l.theta.cols()))
                .collect(),
        }
    }

    pub fn add_scaled_assign(&mut self, s: f64, other: &Gradients) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(Error::shape(
                "gradients",
                (self.layers.len(), 0),
                (other.layers.len(), 0),
            ));
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add_scaled_assign(s, b)?;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Gradients {
        Gradients {
            layers: self.layers.iter().map(|g| g.scale(s)).collect(),
        }
    }

    /// Frobenius norm of the concatenation of all layers.
    pub fn norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }
}

impl Network {
    /// Layers with the given widths `d^1 … d^(L+1)`: relu on hidden layers,
    /// identity on the output. Weights are uniform in `±1/sqrt(fan_in)`,
    /// biases zero.
    pub fn new(widths: &[usize], rng: &mut SplitMix64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Input(format!("invalid network widths {widths:?}")));
        }
        let last = widths.len() - 2;
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = 1.0 / (fan_in as f64).sqrt();
                let theta = Matrix::from_fn(fan_in + 1, fan_out, |i, _| {
                    if i == fan_in {
                        0.0
                    } else {
                        rng.uniform(-bound, bound)
                    }
                });
                let act = if l == last {
                    Activation::Identity
                } else {
                    Activation::Relu
                };
                Layer::new(theta, act)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Input("network needs at least one layer".into()));
        }
        for (l, pair) in layers.windows(2).enumerate() {
            if pair[0].output_width() != pair[1].input_width() {
                return Err(Error::Input(format!(
                    "layer {l} outputs {} units but layer {} expects {}",
                    pair[0].output_width(),
                    l + 1,
                    pair[1].input_width()
                )));
            }
        }
        if layers.last().map(|l| l.activation) != Some(Activation::Identity) {
            return Err(Error::Input("final layer must use the identity activation".into()));
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input_width()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_width)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.layers.iter().map(Layer::output_width));
        w
    }

    /// All parameters flattened layer by layer.
    pub fn flat_params(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.theta.data().iter().copied())
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<ForwardTrace> {
        if x.cols() != self.input_width() {
            return Err(Error::shape(
                "forward",
                x.shape(),
                (x.rows(), self.input_width()),
            ));
        }
        let mut z = Vec::with_capacity(self.layers.len());
        let mut h = x.with_ones_column();
        for layer in &self.layers {
            let mut pre = matmul(&h, &layer.theta)?;
            pre.data_mut()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            z.push(h);
            h = pre.with_ones_column();
        }
        Ok(ForwardTrace {
            z,
            logits: h.without_last_column(),
        })
    }

    /// Predicted class of every row.
    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.forward(x)?.logits;
        Ok((0..logits.rows())
            .map(|i| {
                logits
                    .row(i)
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                        if v > best.1 {
                            (j, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, batch: &Batch) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Input("accuracy of an empty batch".into()));
        }
        let pred = self.predict(&batch.features)?;
        let correct = pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count();
        Ok(correct as f64 / batch.len() as f64)
    }

    pub fn backward(&self, trace: &ForwardTrace, dlogits: &Matrix) -> Result<Gradients> {
        if trace.z.len() != self.layers.len()
            || dlogits.shape() != trace.logits.shape()
            || dlogits.cols() != self.output_width()
        {
            return Err(Error::shape(
                "backward",
                dlogits.shape(),
                (trace.logits.rows(), self.output_width()),
            ));
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = dlogits.clone();
        for l in (0..self.layers.len()).rev() {
            let z = &trace.z[l];
            if z.cols() != self.layers[l].theta.rows() || z.rows() != delta.rows() {
                return Err(Error::shape("backward", z.shape(), self.layers[l].theta.shape()));
            }
            grads.push(z.t_matmul(&delta)?);
            if l == 0 {
                break;
            }
            // Back through the weights, dropping the bias row.
            let theta = &self.layers[l].theta;
            let fan_in = theta.rows() - 1;
            let mut back = Matrix::from_fn(delta.rows(), fan_in, |i, k| {
                crate::linalg::dot(delta.row(i), theta.row(k))
            });
            if self.layers[l - 1].activation == Activation::Relu {
                // z[l] holds relu outputs; a unit is active iff its output is positive.
                for i in 0..back.rows() {
                    let zi = z.row(i);
                    for (b, &a) in back.row_mut(i).iter_mut().zip(zi) {
                        if a <= 0.0 {
                            *b = 0.0;
                        }
                    }
                }
            }
            delta = back;
        }
        grads.reverse();
        Ok(Gradients { layers: grads })
    }

    /// Mean softmax cross-entropy of `batch` and its parameter gradients.
    pub fn loss_and_gradients(&self, batch: &Batch) -> Result<(f64, Gradients)> {
        let trace = self.forward(&batch.features)?;
        let (loss, dlogits) = softmax_cross_entropy(&trace.logits, &batch.labels)?;
        Ok((loss, self.backward(&trace, &dlogits)?))
    }
}

/// Mean cross-entropy over the batch and `(softmax − onehot) / batch`.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    if logits.rows() != labels.len() {
        return Err(Error::shape("softmax_cross_entropy", logits.shape(), (labels.len(), 1)));
    }
    if logits.rows() == 0 {
        return Err(Error::Input("cross-entropy of an empty batch".into()));
    }
    let classes = logits.cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!("label {bad} out of range for {classes} classes")));
    }
    let n = logits.rows() as f64;
    let mut grad = Matrix::zeros(logits.rows(), classes);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln() + max;
        loss += log_sum - row[y];
        for (j, g) in grad.row_mut(i).iter_mut().enumerate() {
            let p = (row[j] - log_sum).exp();
            *g = (p - if j == y { 1.0 } else { 0.0 }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// `L_new + α · L_replay` and the matching gradient sum. An empty replay batch
/// contributes nothing.
pub fn combined_replay_loss(
    net: &Network,
    new_batch: &Batch,
    replay_batch: &Batch,
    alpha: f64,
) -> Result<(f64, Gradients)> {
    let (mut loss, mut grads) = net.loss_and_gradients(new_batch)?;
    if alpha != 0.0 && !replay_batch.is_empty() {
        let (replay_loss, replay_grads) = net.loss_and_gradients(replay_batch)?;
        loss += alpha * replay_loss;
        grads.add_scaled_assign(alpha, &replay_grads)?;
    }
    Ok((loss, grads))
}
