//! Attention-MIL baseline.
//!
//! A per-clip classification head `c` (`T x C`, sigmoid) and a per-clip
//! attention head producing logits that are softmax-normalized over time into
//! `a` (`T`). The bag score per class is `s_c = sum_t a_t c_{t,c}` and the loss
//! is BCE of `s` against the bag label, for positive and negative bags alike.
//!
//! Training follows the same epoch schedule as EM-MIL: E phases update the
//! attention head, M phases the classification head.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::{BagLabel, Dataset};
use crate::numerics::{
    bce_loss, Activation, DenseMatrix, Gradients, OptimizerState, ScoringNetwork,
};
use crate::training::{validate_training_data, Phase, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionNetwork {
    pub classifier: ScoringNetwork,
    /// Unnormalized attention logits, `d -> 1`, identity output.
    pub attention: ScoringNetwork,
}

#[derive(Debug, Clone)]
pub struct AttentionLoss {
    pub loss: f64,
    pub bag_scores: Vec<f64>,
    pub weights: Vec<f64>,
    pub classifier_grads: Gradients,
    pub attention_grads: Gradients,
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&u| (u - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `s_c = sum_t a_t c_{t,c}`.
pub fn aggregate(weights: &[f64], clip_scores: &DenseMatrix) -> Vec<f64> {
    (0..clip_scores.cols())
        .map(|c| (0..clip_scores.rows()).map(|t| weights[t] * clip_scores.get(t, c)).sum())
        .collect()
}

impl AttentionNetwork {
    /// Heads share the feature input and use the EM-MIL hidden widths.
    pub fn new(feature_dim: usize, num_classes: usize, config: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut cdims = vec![feature_dim];
        cdims.extend_from_slice(&config.classifier_hidden);
        cdims.push(num_classes);
        let mut adims = vec![feature_dim];
        adims.extend_from_slice(&config.assigner_hidden);
        adims.push(1);
        Ok(Self {
            classifier: ScoringNetwork::new(&cdims, &mut rng)?,
            attention: ScoringNetwork::with_output_activation(&adims, Activation::Identity, &mut rng)?,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    /// Attention weights over the clips; sums to one.
    pub fn weights(&self, features: &DenseMatrix) -> Result<Vec<f64>> {
        Ok(softmax(self.attention.forward(features)?.as_slice()))
    }

    pub fn bag_scores(&self, features: &DenseMatrix) -> Result<Vec<f64>> {
        let c = self.classifier.forward(features)?;
        Ok(aggregate(&self.weights(features)?, &c))
    }
}

/// Bag-level BCE of the attention-pooled scores, with gradients for both heads.
pub fn attention_bag_loss(
    net: &AttentionNetwork,
    features: &DenseMatrix,
    y: &BagLabel,
) -> Result<AttentionLoss> {
    if y.num_classes() != net.num_classes() {
        return Err(Error::Config(format!(
            "label has {} classes, network scores {}",
            y.num_classes(),
            net.num_classes()
        )));
    }
    let c_cache = net.classifier.forward_cached(features)?;
    let u_cache = net.attention.forward_cached(features)?;
    let c = c_cache.output();
    let a = softmax(u_cache.output().as_slice());
    let s = aggregate(&a, c);

    let targets: Vec<f64> = y.as_slice().iter().map(|&v| f64::from(v)).collect();
    let loss = bce_loss(
        &DenseMatrix::from_vec(1, s.len(), s.clone())?,
        &DenseMatrix::from_vec(1, targets.len(), targets)?,
        None,
    )?;
    let g = loss.gradient.as_slice();

    let (t_len, c_len) = c.shape();
    let mut dc = DenseMatrix::zeros(t_len, c_len);
    let mut da = vec![0.0; t_len];
    for t in 0..t_len {
        for k in 0..c_len {
            dc.set(t, k, a[t] * g[k]);
            da[t] += c.get(t, k) * g[k];
        }
    }
    let inner: f64 = a.iter().zip(&da).map(|(x, y)| x * y).sum();
    let du: Vec<f64> = a.iter().zip(&da).map(|(&at, &dat)| at * (dat - inner)).collect();

    Ok(AttentionLoss {
        loss: loss.loss,
        bag_scores: s,
        classifier_grads: net.classifier.backward(&c_cache, &dc)?,
        attention_grads: net.attention.backward(&u_cache, &DenseMatrix::column_vector(&du))?,
        weights: a,
    })
}

/// Per-clip localization scores `a_t * c_{t,c}` (`T x C`).
pub fn attention_localize(net: &AttentionNetwork, features: &DenseMatrix) -> Result<DenseMatrix> {
    let c = net.classifier.forward(features)?;
    let a = net.weights(features)?;
    let mut out = c.clone();
    for t in 0..c.rows() {
        for v in out.row_mut(t) {
            *v *= a[t];
        }
    }
    Ok(out)
}

/// Shannon entropy of an attention distribution.
pub fn attention_entropy(weights: &[f64]) -> f64 {
    -weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| w * w.ln())
        .sum::<f64>()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionEpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub learning_rate: f64,
    pub mean_loss: f64,
    /// Mean attention entropy over positive bags after the epoch.
    pub mean_positive_entropy: f64,
}

#[derive(Debug, Clone)]
pub struct AttentionTrainState {
    pub model: AttentionNetwork,
    pub classifier_opt: OptimizerState,
    pub attention_opt: OptimizerState,
    pub loss_history: Vec<f64>,
    pub history: Vec<AttentionEpochRecord>,
}

/// Mean attention entropy over the positive bags of `data`.
pub fn mean_positive_entropy(net: &AttentionNetwork, data: &Dataset) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for bag in data.bags().iter().filter(|b| b.label.is_positive()) {
        total += attention_entropy(&net.weights(bag.features())?);
        n += 1;
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}

pub fn train_attention(config: &TrainConfig, data: &Dataset) -> Result<AttentionTrainState> {
    validate_training_data(data)?;
    let plan = config.epoch_plan()?;
    let model = AttentionNetwork::new(data.feature_dim(), data.num_classes(), config)?;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    shuffle_rng.set_stream(1);
    let mut state = AttentionTrainState {
        classifier_opt: OptimizerState::new(&model.classifier, config.learning_rate),
        attention_opt: OptimizerState::new(&model.attention, config.learning_rate),
        model,
        loss_history: Vec::new(),
        history: Vec::new(),
    };

    for (epoch, p) in plan.iter().enumerate() {
        state.classifier_opt.learning_rate = p.learning_rate;
        state.attention_opt.learning_rate = p.learning_rate;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        for i in order {
            let bag = &data.bags()[i];
            let out = attention_bag_loss(&state.model, bag.features(), &bag.label)?;
            if matches!(p.phase, Phase::E | Phase::Joint) {
                state.attention_opt.step(&mut state.model.attention, &out.attention_grads)?;
            }
            if matches!(p.phase, Phase::M | Phase::Joint) {
                state.classifier_opt.step(&mut state.model.classifier, &out.classifier_grads)?;
            }
            loss_sum += out.loss;
            state.loss_history.push(out.loss);
        }
        state.history.push(AttentionEpochRecord {
            epoch: epoch + 1,
            phase: p.phase,
            learning_rate: p.learning_rate,
            mean_loss: loss_sum / data.len() as f64,
            mean_positive_entropy: mean_positive_entropy(&state.model, data)?,
        });
    }
    Ok(state)
}
