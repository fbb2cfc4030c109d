//! Alternating E/M optimization of the assignment and classification branches.
//!
//! E epochs freeze the classifier, derive key-instance targets from its scores
//! and take one gradient step on the assigner per bag. M epochs do the reverse
//! with the assigner's scores. Joint mode steps both branches on every bag.

mod config;
mod logfile;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use self::config::{EpochPlan, Phase, Stage, TrainConfig, TrainMode};
pub use self::logfile::{read_training_log, write_training_log};
use crate::error::{Error, Result};
use crate::mil::{
    e_step_pseudo_labels, m_step_pseudo_labels, masked_targets_for_classifier, Bag, Dataset,
    ScoreMaps,
};
use crate::numerics::{backward_and_step, bce_loss, DenseMatrix, OptimizerState, ScoringNetwork, BCE_EPSILON};

/// The two EM-MIL branches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmMilModel {
    /// Classification branch, `d -> C`.
    pub classifier: ScoringNetwork,
    /// Key-instance assignment branch, `d -> 1`.
    pub assigner: ScoringNetwork,
}

impl EmMilModel {
    pub fn new(feature_dim: usize, num_classes: usize, config: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let dims = |hidden: &[usize], out: usize| {
            let mut d = vec![feature_dim];
            d.extend_from_slice(hidden);
            d.push(out);
            d
        };
        let classifier = ScoringNetwork::new(&dims(&config.classifier_hidden, num_classes), &mut rng)?;
        let assigner = ScoringNetwork::new(&dims(&config.assigner_hidden, 1), &mut rng)?;
        Ok(Self {
            classifier,
            assigner,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.input_dim()
    }

    pub fn score(&self, features: &DenseMatrix) -> Result<ScoreMaps> {
        let p = self.classifier.forward(features)?;
        let q = self.assigner.forward(features)?.into_vec();
        Ok(ScoreMaps { p, q })
    }
}

/// Aggregation operator over clips used by [`elbo_proxy`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Max,
    Mean,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 0 for the state before training.
    pub epoch: usize,
    pub phase: Option<Phase>,
    pub learning_rate: f64,
    pub mean_loss: Option<f64>,
    pub elbo_proxy: f64,
    /// Fraction of clips given a positive pseudo-label this epoch.
    pub positive_rate: Option<f64>,
    /// Recall of the E-step rule on the current classifier against planted key
    /// instances, when the dataset carries them.
    pub key_recall: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub mean_loss: f64,
    pub positive_rate: f64,
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: EmMilModel,
    pub classifier_opt: OptimizerState,
    pub assigner_opt: OptimizerState,
    pub epoch: usize,
    pub phase: Option<Phase>,
    /// Loss of every gradient step, in order.
    pub loss_history: Vec<f64>,
    pub history: Vec<EpochRecord>,
    shuffle_rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: EmMilModel, config: &TrainConfig) -> Self {
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle_rng.set_stream(1);
        Self {
            classifier_opt: OptimizerState::new(&model.classifier, config.learning_rate),
            assigner_opt: OptimizerState::new(&model.assigner, config.learning_rate),
            model,
            epoch: 0,
            phase: None,
            loss_history: Vec::new(),
            history: Vec::new(),
            shuffle_rng,
        }
    }

    fn visit_order(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.shuffle_rng);
        order
    }

    /// One E epoch: the classifier is frozen, the assigner takes one step per
    /// bag towards the E-step pseudo-labels (or all-ones for positive bags when
    /// `warm_start`).
    pub fn run_e_epoch(&mut self, data: &Dataset, learning_rate: f64, warm_start: bool) -> Result<EpochStats> {
        self.assigner_opt.learning_rate = learning_rate;
        let (mut loss_sum, mut positives, mut clips) = (0.0, 0usize, 0usize);
        for i in self.visit_order(data.len()) {
            let bag = &data.bags()[i];
            let z_hat = assignment_targets(&self.model.classifier, bag, warm_start)?;
            positives += z_hat.iter().filter(|&&z| z).count();
            clips += z_hat.len();
            let loss = step_assigner(&mut self.model.assigner, &mut self.assigner_opt, bag, &z_hat)?;
            loss_sum += loss;
            self.loss_history.push(loss);
        }
        self.epoch += 1;
        self.phase = Some(Phase::E);
        Ok(EpochStats {
            mean_loss: loss_sum / data.len() as f64,
            positive_rate: positives as f64 / clips as f64,
        })
    }

    pub fn run_m_epoch(&mut self, data: &Dataset, learning_rate: f64, gamma: f64) -> Result<EpochStats> {
        self.run_m_epoch_with_probe(data, learning_rate, gamma, &mut |_, _| {})
    }

    /// M epoch with a hook that sees each bag's classifier targets before the
    /// step is taken.
    pub fn run_m_epoch_with_probe(
        &mut self,
        data: &Dataset,
        learning_rate: f64,
        gamma: f64,
        probe: &mut dyn FnMut(&Bag, &DenseMatrix),
    ) -> Result<EpochStats> {
        self.classifier_opt.learning_rate = learning_rate;
        let (mut loss_sum, mut positives, mut clips) = (0.0, 0usize, 0usize);
        for i in self.visit_order(data.len()) {
            let bag = &data.bags()[i];
            let q = self.model.assigner.forward(bag.features())?.into_vec();
            let y_hat = m_step_pseudo_labels(&q, &bag.label, gamma);
            probe(bag, &y_hat);
            positives += count_positive_rows(&y_hat);
            clips += y_hat.rows();
            let loss = step_classifier(&mut self.model.classifier, &mut self.classifier_opt, bag, &y_hat)?;
            loss_sum += loss;
            self.loss_history.push(loss);
        }
        self.epoch += 1;
        self.phase = Some(Phase::M);
        Ok(EpochStats {
            mean_loss: loss_sum / data.len() as f64,
            positive_rate: positives as f64 / clips as f64,
        })
    }

    /// Both branches step on every bag, each from the other's current scores.
    pub fn run_joint_epoch(
        &mut self,
        data: &Dataset,
        learning_rate: f64,
        gamma: f64,
        warm_start: bool,
    ) -> Result<EpochStats> {
        self.assigner_opt.learning_rate = learning_rate;
        self.classifier_opt.learning_rate = learning_rate;
        let (mut loss_sum, mut positives, mut clips) = (0.0, 0usize, 0usize);
        for i in self.visit_order(data.len()) {
            let bag = &data.bags()[i];
            // both targets come from the parameters before this bag's update
            let z_hat = assignment_targets(&self.model.classifier, bag, warm_start)?;
            let q = self.model.assigner.forward(bag.features())?.into_vec();
            let y_hat = m_step_pseudo_labels(&q, &bag.label, gamma);
            positives += z_hat.iter().filter(|&&z| z).count();
            clips += z_hat.len();
            let lq = step_assigner(&mut self.model.assigner, &mut self.assigner_opt, bag, &z_hat)?;
            let lp = step_classifier(&mut self.model.classifier, &mut self.classifier_opt, bag, &y_hat)?;
            loss_sum += lq + lp;
            self.loss_history.push(lq + lp);
        }
        self.epoch += 1;
        self.phase = Some(Phase::Joint);
        Ok(EpochStats {
            mean_loss: loss_sum / data.len() as f64,
            positive_rate: positives as f64 / clips as f64,
        })
    }

    fn record(&mut self, data: &Dataset, plan: Option<&EpochPlan>, stats: Option<EpochStats>) -> Result<()> {
        let record = EpochRecord {
            epoch: self.epoch,
            phase: plan.map(|p| p.phase),
            learning_rate: plan.map_or(0.0, |p| p.learning_rate),
            mean_loss: stats.map(|s| s.mean_loss),
            elbo_proxy: elbo_proxy(&self.model, data, Aggregation::Max)?,
            positive_rate: stats.map(|s| s.positive_rate),
            key_recall: key_instance_recall(&self.model, data)?,
        };
        ::log::debug!(
            "epoch {:>3} {:>2} loss {:?} elbo {:.4}",
            record.epoch,
            record.phase.map_or("-", Phase::as_str),
            record.mean_loss,
            record.elbo_proxy
        );
        self.history.push(record);
        Ok(())
    }
}

fn assignment_targets(classifier: &ScoringNetwork, bag: &Bag, warm_start: bool) -> Result<Vec<bool>> {
    if warm_start && bag.label.is_positive() {
        return Ok(vec![true; bag.len()]);
    }
    let p = classifier.forward(bag.features())?;
    Ok(e_step_pseudo_labels(&p, &bag.label))
}

fn step_assigner(
    assigner: &mut ScoringNetwork,
    opt: &mut OptimizerState,
    bag: &Bag,
    z_hat: &[bool],
) -> Result<f64> {
    let cache = assigner.forward_cached(bag.features())?;
    let targets = DenseMatrix::column_vector(&z_hat.iter().map(|&z| f64::from(z as u8)).collect::<Vec<_>>());
    let loss = bce_loss(cache.output(), &targets, None)?;
    backward_and_step(assigner, opt, &cache, &loss.gradient)?;
    Ok(loss.loss)
}

fn step_classifier(
    classifier: &mut ScoringNetwork,
    opt: &mut OptimizerState,
    bag: &Bag,
    y_hat: &DenseMatrix,
) -> Result<f64> {
    let (targets, mask) = masked_targets_for_classifier(y_hat);
    let cache = classifier.forward_cached(bag.features())?;
    let loss = bce_loss(cache.output(), &targets, Some(&mask))?;
    backward_and_step(classifier, opt, &cache, &loss.gradient)?;
    Ok(loss.loss)
}

fn count_positive_rows(m: &DenseMatrix) -> usize {
    (0..m.rows()).filter(|&t| m.row(t).iter().any(|&v| v > 0.0)).count()
}

pub fn validate_training_data(data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    if data.positive_count() == 0 {
        return Err(Error::Data(
            "no positive bags: key-instance assignment unidentifiable".into(),
        ));
    }
    Ok(())
}

/// Runs the configured schedule from a freshly initialized model.
pub fn train(config: &TrainConfig, data: &Dataset) -> Result<TrainState> {
    let model = EmMilModel::new(data.feature_dim(), data.num_classes(), config)?;
    train_from(model, config, data)
}

/// Runs the configured schedule starting from `model`.
pub fn train_from(model: EmMilModel, config: &TrainConfig, data: &Dataset) -> Result<TrainState> {
    validate_training_data(data)?;
    let plan = config.epoch_plan()?;
    if model.feature_dim() != data.feature_dim() || model.num_classes() != data.num_classes() {
        return Err(Error::Config(format!(
            "model is {}->{} but data has d={} and C={}",
            model.feature_dim(),
            model.num_classes(),
            data.feature_dim(),
            data.num_classes()
        )));
    }
    let mut state = TrainState::new(model, config);
    state.record(data, None, None)?;
    for p in &plan {
        let stats = match p.phase {
            Phase::E => state.run_e_epoch(data, p.learning_rate, p.warm_start)?,
            Phase::M => state.run_m_epoch(data, p.learning_rate, config.gamma)?,
            Phase::Joint => state.run_joint_epoch(data, p.learning_rate, config.gamma, p.warm_start)?,
        };
        state.record(data, Some(p), Some(stats))?;
    }
    Ok(state)
}

/// Diagnostic estimate of the variational lower bound; higher is better.
///
/// For every bag, each labeled class contributes
/// `log agg_t(P[t,c] * [Q_t > 0.5])`, each absent class contributes
/// `log(1 - agg_t P[t,c])`, and the mean per-clip Bernoulli entropy of `Q` is
/// added. Probabilities are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]`.
pub fn elbo_proxy(model: &EmMilModel, data: &Dataset, aggregation: Aggregation) -> Result<f64> {
    let mut total = 0.0;
    for bag in data.bags() {
        let scores = model.score(bag.features())?;
        total += bag_elbo_proxy(&scores, &bag.label.as_slice().iter().map(|&v| v == 1).collect::<Vec<_>>(), aggregation);
    }
    Ok(total)
}

/// Per-bag term of [`elbo_proxy`] on precomputed scores.
pub fn bag_elbo_proxy(scores: &ScoreMaps, labels: &[bool], aggregation: Aggregation) -> f64 {
    let clamp = |p: f64| p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
    let t_len = scores.q.len();
    let agg = |vals: &mut dyn Iterator<Item = f64>| match aggregation {
        Aggregation::Max => vals.fold(0.0, f64::max),
        Aggregation::Mean => vals.sum::<f64>() / t_len as f64,
    };
    let mut value = 0.0;
    for (c, &positive) in labels.iter().enumerate() {
        if positive {
            let s = agg(&mut (0..t_len).map(|t| {
                if scores.q[t] > 0.5 {
                    scores.p.get(t, c)
                } else {
                    0.0
                }
            }));
            value += clamp(s).ln();
        } else {
            let s = agg(&mut (0..t_len).map(|t| scores.p.get(t, c)));
            value += (1.0 - clamp(s)).ln();
        }
    }
    let entropy: f64 = scores
        .q
        .iter()
        .map(|&q| {
            let q = clamp(q);
            -(q * q.ln() + (1.0 - q) * (1.0 - q).ln())
        })
        .sum::<f64>()
        / t_len as f64;
    value + entropy
}

/// Recall of the E-step rule applied to the current classifier against the
/// planted key instances of positive bags. `None` without ground truth.
pub fn key_instance_recall(model: &EmMilModel, data: &Dataset) -> Result<Option<f64>> {
    let (mut hit, mut total) = (0usize, 0usize);
    for bag in data.bags().iter().filter(|b| b.label.is_positive()) {
        let Some(truth) = &bag.key_instances else {
            return Ok(None);
        };
        let p = model.classifier.forward(bag.features())?;
        let z_hat = e_step_pseudo_labels(&p, &bag.label);
        for (&z, &t) in z_hat.iter().zip(truth) {
            if t {
                total += 1;
                hit += usize::from(z);
            }
        }
    }
    Ok((total > 0).then(|| hit as f64 / total as f64))
}
