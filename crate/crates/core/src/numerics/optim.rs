use serde::{Deserialize, Serialize};

use super::network::{ForwardCache, Gradients, ScoringNetwork};
use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

/// Adam moment accumulators for one network.
///
/// Buffers are kept per parameter group: for layer `i`, group `2i` holds the
/// weights and `2i + 1` the bias.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(net: &ScoringNetwork, learning_rate: f64) -> Self {
        let mut first = Vec::new();
        for l in net.layers() {
            first.push(vec![0.0; l.weights.len()]);
            first.push(vec![0.0; l.bias.len()]);
        }
        Self {
            learning_rate,
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step: 0,
            second: first.clone(),
            first,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one Adam update to `net`. Gradients are checked for finiteness
    /// before any parameter is touched.
    pub fn step(&mut self, net: &mut ScoringNetwork, grads: &Gradients) -> Result<()> {
        if grads.layers.len() != net.layers().len() || self.first.len() != 2 * grads.layers.len() {
            return Err(Error::Config(
                "gradient layout does not match network/optimizer".into(),
            ));
        }
        for (i, (g, l)) in grads.layers.iter().zip(net.layers()).enumerate() {
            if g.weights.shape() != l.weights.shape() || g.bias.len() != l.bias.len() {
                return Err(Error::Config(format!("gradient shape mismatch in layer {i}")));
            }
            if !g.weights.all_finite() || !g.bias.iter().all(|b| b.is_finite()) {
                return Err(Error::NonFiniteGradient { layer: i });
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (i, (layer, g)) in net.layers_mut().iter_mut().zip(&grads.layers).enumerate() {
            self.update_group(2 * i, layer.weights.as_mut_slice(), g.weights.as_slice(), bc1, bc2);
            self.update_group(2 * i + 1, &mut layer.bias, &g.bias, bc1, bc2);
        }
        for (i, l) in net.layers().iter().enumerate() {
            if !l.weights.all_finite() || !l.bias.iter().all(|b| b.is_finite()) {
                return Err(Error::Internal(format!(
                    "parameters of layer {i} became non-finite after update"
                )));
            }
        }
        Ok(())
    }

    fn update_group(&mut self, group: usize, params: &mut [f64], grads: &[f64], bc1: f64, bc2: f64) {
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learning_rate, self.epsilon);
        let m = &mut self.first[group];
        let v = &mut self.second[group];
        for k in 0..params.len() {
            let g = grads[k];
            m[k] = b1 * m[k] + (1.0 - b1) * g;
            v[k] = b2 * v[k] + (1.0 - b2) * g * g;
            let m_hat = m[k] / bc1;
            let v_hat = v[k] / bc2;
            params[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Back-propagates `grad_output` through the cached forward pass and applies
/// one optimizer step. Returns the gradients that were applied.
pub fn backward_and_step(
    net: &mut ScoringNetwork,
    state: &mut OptimizerState,
    cache: &ForwardCache,
    grad_output: &DenseMatrix,
) -> Result<Gradients> {
    let grads = net.backward(cache, grad_output)?;
    state.step(net, &grads)?;
    Ok(grads)
}
