//! Score fusion, thresholding and grouping of clips into temporal proposals.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attention::{attention_localize, AttentionNetwork};
use crate::error::{Error, Result};
use crate::mil::{dynamic_threshold, Dataset};
use crate::numerics::DenseMatrix;
use crate::training::EmMilModel;

/// Class-wise temporal segment `[start_sec, end_sec)` with a confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub class: usize,
    pub start_sec: f64,
    pub end_sec: f64,
    pub confidence: f64,
}

/// A proposal attached to the bag it was produced for.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub bag_id: String,
    pub proposal: Proposal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMode {
    Mean,
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferConfig {
    /// Weight of the assignment score in the fused localization score.
    pub lambda: f64,
    /// Threshold margin for grouping; the training gamma when absent.
    pub gamma: Option<f64>,
    pub confidence: ConfidenceMode,
    /// Runs separated by at most this many below-threshold clips are merged.
    pub merge_gap: usize,
}

impl Default for InferConfig {
    fn default() -> Self {
        Self {
            lambda: 0.8,
            gamma: None,
            confidence: ConfidenceMode::Mean,
            merge_gap: 0,
        }
    }
}

/// `L[t, c] = lambda * Q[t] + (1 - lambda) * P[t, c]`.
pub fn fuse_scores(q: &[f64], p: &DenseMatrix, lambda: f64) -> Result<DenseMatrix> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Config(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if q.len() != p.rows() {
        return Err(Error::Config(format!(
            "assignment scores have {} clips, classification scores {}",
            q.len(),
            p.rows()
        )));
    }
    let mut out = p.clone();
    for (t, &qt) in q.iter().enumerate() {
        for v in out.row_mut(t) {
            *v = lambda * qt + (1.0 - lambda) * *v;
        }
    }
    Ok(out)
}

/// Classes whose best clip score exceeds 0.5.
pub fn predict_classes(p: &DenseMatrix) -> Vec<usize> {
    (0..p.cols())
        .filter(|&c| (0..p.rows()).any(|t| p.get(t, c) > 0.5))
        .collect()
}

/// Maximal runs `[start, end)` of `true`, merging runs separated by at most
/// `merge_gap` `false` entries.
pub fn runs(mask: &[bool], merge_gap: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = Vec::new();
    let mut t = 0;
    while t < mask.len() {
        if !mask[t] {
            t += 1;
            continue;
        }
        let start = t;
        while t < mask.len() && mask[t] {
            t += 1;
        }
        match out.last_mut() {
            Some(last) if start - last.1 <= merge_gap => last.1 = t,
            _ => out.push((start, t)),
        }
    }
    out
}

pub fn propose(
    scores: &DenseMatrix,
    classes: &[usize],
    gamma: f64,
    clip_duration_sec: f64,
) -> Vec<Proposal> {
    propose_with(scores, classes, gamma, ConfidenceMode::Mean, 0, clip_duration_sec)
}

/// For each listed class, thresholds its column at `mean + gamma * range`
/// (strictly) and turns each run of surviving clips into a proposal.
pub fn propose_with(
    scores: &DenseMatrix,
    classes: &[usize],
    gamma: f64,
    confidence: ConfidenceMode,
    merge_gap: usize,
    clip_duration_sec: f64,
) -> Vec<Proposal> {
    let mut out = Vec::new();
    for &c in classes {
        let col = scores.column(c);
        if col.is_empty() {
            continue;
        }
        let threshold = dynamic_threshold(&col, gamma);
        let mask: Vec<bool> = col.iter().map(|&v| v > threshold).collect();
        for (start, end) in runs(&mask, merge_gap) {
            let span = &col[start..end];
            let conf = match confidence {
                ConfidenceMode::Mean => span.iter().sum::<f64>() / span.len() as f64,
                ConfidenceMode::Max => span.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            };
            out.push(Proposal {
                class: c,
                start_sec: start as f64 * clip_duration_sec,
                end_sec: end as f64 * clip_duration_sec,
                confidence: conf,
            });
        }
    }
    out
}

/// Clip mask covered by the proposals of `class`.
pub fn proposals_to_mask(
    proposals: &[Proposal],
    class: Option<usize>,
    num_clips: usize,
    clip_duration_sec: f64,
) -> Vec<bool> {
    let mut mask = vec![false; num_clips];
    for p in proposals.iter().filter(|p| class.is_none_or(|c| p.class == c)) {
        let start = (p.start_sec / clip_duration_sec).round() as usize;
        let end = ((p.end_sec / clip_duration_sec).round() as usize).min(num_clips);
        for m in &mut mask[start.min(end)..end] {
            *m = true;
        }
    }
    mask
}

/// A trained model of either family.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TrainedModel {
    Emmil(EmMilModel),
    Attention(AttentionNetwork),
}

impl TrainedModel {
    pub fn feature_dim(&self) -> usize {
        match self {
            TrainedModel::Emmil(m) => m.feature_dim(),
            TrainedModel::Attention(m) => m.feature_dim(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TrainedModel::Emmil(m) => m.num_classes(),
            TrainedModel::Attention(m) => m.num_classes(),
        }
    }

    /// Predicted classes and per-clip localization scores for one bag.
    pub fn localization(&self, features: &DenseMatrix, lambda: f64) -> Result<(Vec<usize>, DenseMatrix)> {
        match self {
            TrainedModel::Emmil(m) => {
                let s = m.score(features)?;
                Ok((predict_classes(&s.p), fuse_scores(&s.q, &s.p, lambda)?))
            }
            TrainedModel::Attention(m) => {
                let classes = m
                    .bag_scores(features)?
                    .iter()
                    .enumerate()
                    .filter(|(_, &s)| s > 0.5)
                    .map(|(c, _)| c)
                    .collect();
                Ok((classes, attention_localize(m, features)?))
            }
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| Error::Internal(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }
}

/// Runs `model` over every bag and groups its localization scores.
pub fn infer(model: &TrainedModel, data: &Dataset, config: &InferConfig, default_gamma: f64) -> Result<Vec<Detection>> {
    if model.feature_dim() != data.feature_dim() || model.num_classes() != data.num_classes() {
        return Err(Error::Config(format!(
            "model expects d={} C={}, dataset has d={} C={}",
            model.feature_dim(),
            model.num_classes(),
            data.feature_dim(),
            data.num_classes()
        )));
    }
    let gamma = config.gamma.unwrap_or(default_gamma);
    let mut out = Vec::new();
    for bag in data.bags() {
        let (classes, scores) = model.localization(bag.features(), config.lambda)?;
        let dur = bag.sequence.clip_duration_sec();
        for proposal in propose_with(&scores, &classes, gamma, config.confidence, config.merge_gap, dur) {
            out.push(Detection {
                bag_id: bag.id().to_string(),
                proposal,
            });
        }
    }
    Ok(out)
}

/// One tab-separated line per proposal: bag id, class, start, end, confidence,
/// with six decimals for the real-valued fields.
pub fn format_proposals(detections: &[Detection]) -> String {
    let mut s = String::new();
    for d in detections {
        let p = &d.proposal;
        writeln!(
            s,
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}",
            d.bag_id, p.class, p.start_sec, p.end_sec, p.confidence
        )
        .unwrap();
    }
    s
}

pub fn write_proposals(path: &Path, detections: &[Detection]) -> Result<()> {
    fs::write(path, format_proposals(detections)).map_err(|e| Error::io(path, e))
}

pub fn read_proposals(path: &Path) -> Result<Vec<Detection>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |what: &str| Error::format(path, format!("line {}: {what}", i + 1));
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(bad("expected 5 tab-separated fields"));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad("invalid number"));
        let proposal = Proposal {
            class: fields[1].parse().map_err(|_| bad("invalid class index"))?,
            start_sec: num(fields[2])?,
            end_sec: num(fields[3])?,
            confidence: num(fields[4])?,
        };
        if !(proposal.start_sec < proposal.end_sec) {
            return Err(bad("start must precede end"));
        }
        out.push(Detection {
            bag_id: fields[0].to_string(),
            proposal,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fusion_examples() {
        let p = DenseMatrix::from_rows(&[[0.9]]).unwrap();
        let l = fuse_scores(&[0.5], &p, 0.8).unwrap();
        assert!((l.get(0, 0) - 0.58).abs() < 1e-12);

        let p = DenseMatrix::from_rows(&[[0.1, 0.7], [0.3, 0.2]]).unwrap();
        assert_eq!(fuse_scores(&[0.4, 0.9], &p, 0.0).unwrap(), p);
        let l = fuse_scores(&[0.4, 0.9], &p, 1.0).unwrap();
        assert_eq!(l.as_slice(), &[0.4, 0.4, 0.9, 0.9]);
        assert!(fuse_scores(&[0.4, 0.9], &p, 1.2).is_err());
        assert!(fuse_scores(&[0.4], &p, 0.5).is_err());
    }

    #[test]
    fn grouping_example() {
        let l = DenseMatrix::column_vector(&[0.9, 0.9, 0.1, 0.1, 0.8]);
        let props = propose(&l, &[0], 0.0, 1.25);
        assert_eq!(props.len(), 2);
        assert_eq!((props[0].start_sec, props[0].end_sec), (0.0, 2.5));
        assert!((props[0].confidence - 0.9).abs() < 1e-12);
        assert_eq!((props[1].start_sec, props[1].end_sec), (5.0, 6.25));
        assert!((props[1].confidence - 0.8).abs() < 1e-12);
    }

    #[test]
    fn constant_column_gives_nothing() {
        let l = DenseMatrix::column_vector(&[0.7; 6]);
        assert!(propose(&l, &[0], 0.0, 1.0).is_empty());
    }

    #[test]
    fn runs_split_by_single_gap_stay_apart() {
        let mask = [true, true, false, true];
        assert_eq!(runs(&mask, 0), vec![(0, 2), (3, 4)]);
        assert_eq!(runs(&mask, 1), vec![(0, 4)]);
    }

    #[test]
    fn class_prediction_threshold() {
        let p = DenseMatrix::from_rows(&[[0.4, 0.6], [0.5, 0.1]]).unwrap();
        assert_eq!(predict_classes(&p), vec![1]);
        let low = DenseMatrix::filled(3, 2, 0.2);
        assert!(predict_classes(&low).is_empty());
    }

    #[test]
    fn proposal_file_round_trip() {
        let dets = vec![Detection {
            bag_id: "bag_0001".into(),
            proposal: Proposal {
                class: 2,
                start_sec: 1.25,
                end_sec: 5.0,
                confidence: 0.8123456789,
            },
        }];
        let text = format_proposals(&dets);
        assert_eq!(text, "bag_0001\t2\t1.250000\t5.000000\t0.812346\n");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        write_proposals(&path, &dets).unwrap();
        let back = read_proposals(&path).unwrap();
        assert_eq!(back[0].bag_id, "bag_0001");
        assert_eq!(back[0].proposal.end_sec, 5.0);
    }
}
