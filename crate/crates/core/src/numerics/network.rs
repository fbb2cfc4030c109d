//! Fully connected scoring networks with hand-written reverse-mode gradients.
//!
//! Each input row is an independent example: the network maps a `T x d`
//! feature matrix to a `T x k` score matrix, one row per clip.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Affine map followed by an elementwise activation.
///
/// `weights` is `out x in`, so a row `x` maps to `act(W x + b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    fn forward(&self, input: &DenseMatrix) -> DenseMatrix {
        let (n, out) = (input.rows(), self.output_dim());
        let mut output = DenseMatrix::zeros(n, out);
        for t in 0..n {
            let x = input.row(t);
            let y = output.row_mut(t);
            for (j, yj) in y.iter_mut().enumerate() {
                let w = self.weights.row(j);
                let z = self.bias[j] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                *yj = self.activation.apply(z);
            }
        }
        output
    }
}

/// Per-layer parameter gradients, same shapes as the network's layers.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<LayerGradient>,
    /// Gradient with respect to the network input.
    pub input: DenseMatrix,
}

impl Gradients {
    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|g| g.weights.all_finite() && g.bias.iter().all(|b| b.is_finite()))
    }

    /// Flattened in the same order as [`ScoringNetwork::parameters`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.weights.as_slice());
            out.extend_from_slice(&g.bias);
        }
        out
    }
}

/// Activations recorded by [`ScoringNetwork::forward_cached`]; `activations[0]`
/// is the input and `activations[i + 1]` is the output of layer `i`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    activations: Vec<DenseMatrix>,
}

impl ForwardCache {
    pub fn output(&self) -> &DenseMatrix {
        self.activations.last().expect("cache holds at least the input")
    }
}

/// Multi-layer perceptron: ReLU hidden layers and a configurable output
/// activation (sigmoid for scoring heads).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoringNetwork {
    layers: Vec<Layer>,
}

impl ScoringNetwork {
    /// `dims = [in, hidden.., out]`, ReLU hidden layers, sigmoid output,
    /// Glorot-uniform weights and zero biases.
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        Self::with_output_activation(dims, Activation::Sigmoid, rng)
    }

    pub fn with_output_activation<R: Rng + ?Sized>(
        dims: &[usize],
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(dims)?;
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-a..=a))
                    .collect();
                Layer {
                    weights: DenseMatrix::from_vec(fan_out, fan_in, data)
                        .expect("length matches by construction"),
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n { output } else { Activation::Relu },
                }
            })
            .collect();
        Ok(Self { layers })
    }

    /// All-zero parameters; mostly useful in tests.
    pub fn zeros(dims: &[usize], output: Activation) -> Result<Self> {
        validate_dims(dims)?;
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer {
                weights: DenseMatrix::zeros(w[1], w[0]),
                bias: vec![0.0; w[1]],
                activation: if i + 1 == n { output } else { Activation::Relu },
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.output_dim() {
                return Err(Error::Config(format!(
                    "layer {i}: bias length {} does not match output width {}",
                    l.bias.len(),
                    l.output_dim()
                )));
            }
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Config(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.len() + l.bias.len())
            .sum()
    }

    /// Flattened parameters: per layer, row-major weights then bias.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for l in &self.layers {
            out.extend_from_slice(l.weights.as_slice());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable access to the `index`-th flattened parameter.
    pub fn parameter_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weights.len();
            if index < nw {
                return &mut l.weights.as_mut_slice()[index];
            }
            index -= nw;
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    /// Stable 64-bit digest of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for v in self.parameters() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }

    fn check_input(&self, inputs: &DenseMatrix) -> Result<()> {
        if inputs.cols() != self.input_dim() {
            return Err(Error::Config(format!(
                "input has {} features but network expects {}",
                inputs.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_input(inputs)?;
        let mut x = self.layers[0].forward(inputs);
        for l in &self.layers[1..] {
            x = l.forward(&x);
        }
        Ok(x)
    }

    pub fn forward_cached(&self, inputs: &DenseMatrix) -> Result<ForwardCache> {
        self.check_input(inputs)?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        activations.push(inputs.clone());
        for l in &self.layers {
            let next = l.forward(activations.last().unwrap());
            activations.push(next);
        }
        Ok(ForwardCache { activations })
    }

    /// Back-propagates `grad_output` (dL/d output, `T x k`) through the cached
    /// forward pass.
    pub fn backward(&self, cache: &ForwardCache, grad_output: &DenseMatrix) -> Result<Gradients> {
        let out = cache.output();
        if grad_output.shape() != out.shape() {
            return Err(Error::Config(format!(
                "output gradient is {:?} but network output is {:?}",
                grad_output.shape(),
                out.shape()
            )));
        }
        if cache.activations.len() != self.layers.len() + 1 {
            return Err(Error::Config("forward cache does not match network depth".into()));
        }

        let mut upstream = grad_output.clone();
        let mut grads = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.activations[i];
            let output = &cache.activations[i + 1];
            let n = input.rows();

            // dL/dz = dL/da * act'(z)
            let mut delta = upstream;
            for (d, &a) in delta.as_mut_slice().iter_mut().zip(output.as_slice()) {
                *d *= layer.activation.derivative_from_output(a);
            }

            let mut gw = DenseMatrix::zeros(layer.output_dim(), layer.input_dim());
            let mut gb = vec![0.0; layer.output_dim()];
            let mut grad_input = DenseMatrix::zeros(n, layer.input_dim());
            for t in 0..n {
                let x = input.row(t);
                let dz = delta.row(t);
                for (j, &dzj) in dz.iter().enumerate() {
                    if dzj == 0.0 {
                        continue;
                    }
                    gb[j] += dzj;
                    for (g, &xi) in gw.row_mut(j).iter_mut().zip(x) {
                        *g += dzj * xi;
                    }
                    let w = layer.weights.row(j);
                    for (gi, &wji) in grad_input.row_mut(t).iter_mut().zip(w) {
                        *gi += dzj * wji;
                    }
                }
            }
            grads.push(LayerGradient {
                weights: gw,
                bias: gb,
            });
            upstream = grad_input;
        }
        grads.reverse();
        Ok(Gradients {
            layers: grads,
            input: upstream,
        })
    }
}

fn validate_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Config(
            "network needs at least input and output dimensions".into(),
        ));
    }
    if dims.contains(&0) {
        return Err(Error::Config(format!("zero-width layer in {dims:?}")));
    }
    Ok(())
}
