//! Bags, labels and the two hard pseudo-label generators.
//!
//! The E-step generator turns classifier scores `P` (`T x C`) into a
//! class-agnostic key-instance target per clip; the M-step generator turns
//! assignment scores `Q` (`T`) into a `T x C` classification target that is
//! non-zero only in the bag's ground-truth classes.
//!
//! Both thresholds are strict. When a positive bag would otherwise receive
//! no positive label at all, the highest-scoring clip (first on ties) is
//! marked positive so that every positive bag keeps at least one key instance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::DenseMatrix;

/// A bag: `T` clip features of dimension `d` with the clip duration.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    bag_id: String,
    features: DenseMatrix,
    clip_duration_sec: f64,
}

impl FeatureSequence {
    pub fn new(bag_id: impl Into<String>, features: DenseMatrix, clip_duration_sec: f64) -> Result<Self> {
        let bag_id = bag_id.into();
        if features.rows() == 0 {
            return Err(Error::Data(format!("bag {bag_id}: sequence has no clips")));
        }
        if features.cols() == 0 {
            return Err(Error::Data(format!("bag {bag_id}: feature dimension is zero")));
        }
        if !(clip_duration_sec > 0.0 && clip_duration_sec.is_finite()) {
            return Err(Error::Data(format!(
                "bag {bag_id}: clip duration must be positive, got {clip_duration_sec}"
            )));
        }
        if !features.all_finite() {
            return Err(Error::Data(format!("bag {bag_id}: non-finite feature value")));
        }
        Ok(Self {
            bag_id,
            features,
            clip_duration_sec,
        })
    }

    pub fn bag_id(&self) -> &str {
        &self.bag_id
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn clip_duration_sec(&self) -> f64 {
        self.clip_duration_sec
    }

    /// Number of clips `T`.
    pub fn len(&self) -> usize {
        self.features.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Feature dimension `d`.
    pub fn dim(&self) -> usize {
        self.features.cols()
    }
}

/// Multi-hot bag label. An all-zero label is a negative bag.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BagLabel(Vec<u8>);

impl BagLabel {
    pub fn new(values: Vec<u8>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("bag label has no classes".into()));
        }
        if let Some(v) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Data(format!("bag label entry {v} is not 0 or 1")));
        }
        Ok(Self(values))
    }

    pub fn from_classes(num_classes: usize, classes: &[usize]) -> Result<Self> {
        let mut v = vec![0u8; num_classes];
        for &c in classes {
            if c >= num_classes {
                return Err(Error::Data(format!("class {c} out of range for {num_classes} classes")));
            }
            v[c] = 1;
        }
        Self::new(v)
    }

    pub fn negative(num_classes: usize) -> Self {
        Self(vec![0; num_classes])
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn has(&self, class: usize) -> bool {
        self.0[class] == 1
    }

    pub fn is_positive(&self) -> bool {
        self.0.contains(&1)
    }

    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &v)| v == 1).map(|(c, _)| c)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }
}

/// Per-bag outputs of the two branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMaps {
    /// Classification scores, `T x C`.
    pub p: DenseMatrix,
    /// Assignment scores, length `T`.
    pub q: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    pub z_hat: Vec<bool>,
    /// `T x C`, entries 0.0 or 1.0.
    pub y_hat: DenseMatrix,
}

/// Ground-truth temporal segment of one class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub class: usize,
    pub start_sec: f64,
    pub end_sec: f64,
}

impl Segment {
    pub fn new(class: usize, start_sec: f64, end_sec: f64) -> Result<Self> {
        if !(start_sec < end_sec) || !start_sec.is_finite() || !end_sec.is_finite() {
            return Err(Error::Data(format!(
                "segment [{start_sec}, {end_sec}) must have start < end"
            )));
        }
        Ok(Self {
            class,
            start_sec,
            end_sec,
        })
    }
}

/// A bag together with its weak label and, for synthetic or annotated data,
/// its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Bag {
    pub sequence: FeatureSequence,
    pub label: BagLabel,
    pub segments: Option<Vec<Segment>>,
    /// Per-clip key-instance ground truth, when known.
    pub key_instances: Option<Vec<bool>>,
}

impl Bag {
    pub fn id(&self) -> &str {
        self.sequence.bag_id()
    }

    pub fn features(&self) -> &DenseMatrix {
        self.sequence.features()
    }

    pub fn len(&self) -> usize {
        self.sequence.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Bags sharing a class count and feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    num_classes: usize,
    feature_dim: usize,
    bags: Vec<Bag>,
}

impl Dataset {
    pub fn new(num_classes: usize, feature_dim: usize, bags: Vec<Bag>) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Data("dataset needs at least one class".into()));
        }
        for bag in &bags {
            let id = bag.id();
            if bag.sequence.dim() != feature_dim {
                return Err(Error::Data(format!(
                    "bag {id}: feature dimension {} differs from dataset dimension {feature_dim}",
                    bag.sequence.dim()
                )));
            }
            if bag.label.num_classes() != num_classes {
                return Err(Error::Data(format!(
                    "bag {id}: label has {} classes, dataset has {num_classes}",
                    bag.label.num_classes()
                )));
            }
            if let Some(segs) = &bag.segments {
                for s in segs {
                    if s.class >= num_classes {
                        return Err(Error::Data(format!(
                            "bag {id}: segment references unknown class {}",
                            s.class
                        )));
                    }
                }
            }
            if let Some(z) = &bag.key_instances {
                if z.len() != bag.len() {
                    return Err(Error::Data(format!(
                        "bag {id}: {} key-instance flags for {} clips",
                        z.len(),
                        bag.len()
                    )));
                }
            }
        }
        let mut ids: Vec<&str> = bags.iter().map(Bag::id).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Data(format!("duplicate bag id {}", w[0])));
        }
        Ok(Self {
            num_classes,
            feature_dim,
            bags,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn bags(&self) -> &[Bag] {
        &self.bags
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }

    pub fn bag(&self, id: &str) -> Option<&Bag> {
        self.bags.iter().find(|b| b.id() == id)
    }

    pub fn positive_count(&self) -> usize {
        self.bags.iter().filter(|b| b.label.is_positive()).count()
    }
}

/// Correctly rounded sum (Shewchuk's exact partials). Unlike a running sum
/// its result does not depend on the order of `values`, so thresholds built
/// on it are exactly invariant to permuting or duplicating clips.
fn exact_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // round the exact total held in the non-overlapping partials
    let Some(mut hi) = partials.pop() else {
        return 0.0;
    };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// Rounding of the final division can leave a constant sequence's mean one ulp
/// off, so the result is clamped to the value range.
fn mean(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    let (lo, hi) = values
        .clone()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    (exact_sum(values) / n as f64).max(lo).min(hi)
}

/// Index of the largest value, first index on ties.
fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// E-step target: clip `t` is a key instance iff, for some class the bag is
/// labeled with, `P[t, c]` strictly exceeds the temporal mean of column `c`.
pub fn e_step_pseudo_labels(p: &DenseMatrix, y: &BagLabel) -> Vec<bool> {
    let t_len = p.rows();
    let mut z = vec![false; t_len];
    if !y.is_positive() || t_len == 0 {
        return z;
    }
    for c in y.classes() {
        let col = p.column(c);
        let m = mean(col.iter().copied());
        for (zt, &v) in z.iter_mut().zip(&col) {
            if v > m {
                *zt = true;
            }
        }
    }
    if !z.contains(&true) {
        // Fallback: the clip with the highest score in any labeled class.
        let best: Vec<f64> = (0..t_len)
            .map(|t| y.classes().map(|c| p.get(t, c)).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        z[argmax_first(&best)] = true;
    }
    z
}

/// Threshold used by the M step and by proposal grouping:
/// `mean + gamma * (max - min)`.
pub fn dynamic_threshold(values: &[f64], gamma: f64) -> f64 {
    let m = mean(values.iter().copied());
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    m + gamma * (hi - lo)
}

/// M-step target: `y_hat[t, c] = 1` iff `y_c = 1` and `Q[t]` strictly exceeds
/// [`dynamic_threshold`]`(Q, gamma)`.
pub fn m_step_pseudo_labels(q: &[f64], y: &BagLabel, gamma: f64) -> DenseMatrix {
    let t_len = q.len();
    let c_len = y.num_classes();
    let mut y_hat = DenseMatrix::zeros(t_len, c_len);
    if !y.is_positive() || t_len == 0 {
        return y_hat;
    }
    let threshold = dynamic_threshold(q, gamma);
    let mut selected: Vec<usize> = (0..t_len).filter(|&t| q[t] > threshold).collect();
    if selected.is_empty() {
        selected.push(argmax_first(q));
    }
    for t in selected {
        for c in y.classes() {
            y_hat.set(t, c, 1.0);
        }
    }
    y_hat
}

/// Packages M-step pseudo-labels as classifier targets. Every entry is
/// supervised: background clips and all classes absent from the bag are
/// explicit negatives.
pub fn masked_targets_for_classifier(y_hat: &DenseMatrix) -> (DenseMatrix, DenseMatrix) {
    (y_hat.clone(), DenseMatrix::filled(y_hat.rows(), y_hat.cols(), 1.0))
}

/// Both pseudo-label maps for one bag.
pub fn pseudo_labels(scores: &ScoreMaps, y: &BagLabel, gamma: f64) -> PseudoLabels {
    PseudoLabels {
        z_hat: e_step_pseudo_labels(&scores.p, y),
        y_hat: m_step_pseudo_labels(&scores.q, y, gamma),
    }
}
