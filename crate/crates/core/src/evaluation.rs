//! Temporal detection metrics: tIoU, per-class average precision, mAP at tIoU
//! thresholds and clip-level precision/recall/F1.
//!
//! AP uses greedy matching in descending confidence order (ties keep input
//! order). A detection is a true positive when some not-yet-matched
//! ground-truth segment of the same class in the same bag overlaps it with
//! tIoU >= alpha; the best-overlapping such segment is consumed. The PR curve
//! is integrated with all-point interpolation over its monotone precision
//! envelope.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{proposals_to_mask, Detection, Proposal};
use crate::mil::{Dataset, Segment};

/// tIoU grid for the table layout: 0.1, 0.2, ..., 0.7.
pub fn table_alphas() -> Vec<f64> {
    (1..=7).map(|i| f64::from(i) / 10.0).collect()
}

/// tIoU grid for average mAP: 0.50, 0.55, ..., 0.95.
pub fn average_map_alphas() -> Vec<f64> {
    (0..10).map(|i| f64::from(50 + 5 * i) / 100.0).collect()
}

/// Temporal intersection over union of `[start, end)` intervals.
pub fn tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// A ground-truth segment located in a bag.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub bag_id: String,
    pub segment: Segment,
}

pub fn ground_truth(data: &Dataset) -> Vec<GroundTruth> {
    data.bags()
        .iter()
        .flat_map(|b| {
            b.segments
                .iter()
                .flatten()
                .map(move |s| GroundTruth {
                    bag_id: b.id().to_string(),
                    segment: *s,
                })
        })
        .collect()
}

/// True-positive flags of the class-`class` detections, in ranked order.
fn match_detections(detections: &[Detection], gt: &[GroundTruth], class: usize, alpha: f64) -> Vec<bool> {
    let mut ranked: Vec<&Proposal> = Vec::new();
    let mut bags: Vec<&str> = Vec::new();
    for d in detections.iter().filter(|d| d.proposal.class == class) {
        ranked.push(&d.proposal);
        bags.push(&d.bag_id);
    }
    let mut order: Vec<usize> = (0..ranked.len()).collect();
    // stable: equal confidences keep input order
    order.sort_by(|&a, &b| ranked[b].confidence.total_cmp(&ranked[a].confidence));

    let mut by_bag: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gt.iter().enumerate().filter(|(_, g)| g.segment.class == class) {
        by_bag.entry(g.bag_id.as_str()).or_default().push(i);
    }
    let mut used = vec![false; gt.len()];
    order
        .into_iter()
        .map(|i| {
            let p = ranked[i];
            let mut best: Option<(usize, f64)> = None;
            for &g in by_bag.get(bags[i]).map_or(&[][..], Vec::as_slice) {
                if used[g] {
                    continue;
                }
                let s = &gt[g].segment;
                let ov = tiou((p.start_sec, p.end_sec), (s.start_sec, s.end_sec));
                if ov >= alpha && best.is_none_or(|(_, b)| ov > b) {
                    best = Some((g, ov));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated area under the PR curve of ranked TP flags.
pub fn interpolated_ap(tp_flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut tp = 0usize;
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut recall = Vec::with_capacity(tp_flags.len());
    for (k, &hit) in tp_flags.iter().enumerate() {
        tp += usize::from(hit);
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    ap
}

/// AP of class `class` at tIoU `alpha`; `None` when the class has no ground
/// truth.
pub fn average_precision(detections: &[Detection], gt: &[GroundTruth], class: usize, alpha: f64) -> Option<f64> {
    let num_gt = gt.iter().filter(|g| g.segment.class == class).count();
    if num_gt == 0 {
        return None;
    }
    Some(interpolated_ap(&match_detections(detections, gt, class, alpha), num_gt))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl InstanceMetrics {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            true_positives: tp,
            false_positives: fp,
            false_negatives: fn_,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub alphas: Vec<f64>,
    /// `ap[i][c]`: AP of class `c` at `alphas[i]`; `None` for classes without
    /// ground truth.
    pub ap: Vec<Vec<Option<f64>>>,
    pub map: Vec<f64>,
    pub average_map_alphas: Vec<f64>,
    pub average_map_per_alpha: Vec<f64>,
    pub average_map: f64,
    /// Clip-level metrics of the union of proposals against planted key
    /// instances (or ground-truth segments when those are absent).
    pub instance: Option<InstanceMetrics>,
    pub proposal_count: usize,
    pub bags_with_proposals: usize,
    pub bag_count: usize,
}

impl EvalReport {
    pub fn map_at(&self, alpha: f64) -> Option<f64> {
        self.alphas
            .iter()
            .chain(&self.average_map_alphas)
            .zip(self.map.iter().chain(&self.average_map_per_alpha))
            .find(|(a, _)| (**a - alpha).abs() < 1e-9)
            .map(|(_, m)| *m)
    }
}

fn mean_ap(detections: &[Detection], gt: &[GroundTruth], num_classes: usize, alpha: f64) -> (Vec<Option<f64>>, f64) {
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| average_precision(detections, gt, c, alpha))
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per_class, map)
}

/// Clip-level counts of the proposal union against per-clip truth.
pub fn instance_metrics(detections: &[Detection], data: &Dataset) -> Option<InstanceMetrics> {
    let mut by_bag: HashMap<&str, Vec<Proposal>> = HashMap::new();
    for d in detections {
        by_bag.entry(d.bag_id.as_str()).or_default().push(d.proposal);
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let mut any = false;
    for bag in data.bags() {
        let dur = bag.sequence.clip_duration_sec();
        let truth = match (&bag.key_instances, &bag.segments) {
            (Some(z), _) => z.clone(),
            (None, Some(segs)) => {
                let as_props: Vec<Proposal> = segs
                    .iter()
                    .map(|s| Proposal {
                        class: s.class,
                        start_sec: s.start_sec,
                        end_sec: s.end_sec,
                        confidence: 1.0,
                    })
                    .collect();
                proposals_to_mask(&as_props, None, bag.len(), dur)
            }
            (None, None) => continue,
        };
        any = true;
        let props = by_bag.get(bag.id()).map_or(&[][..], Vec::as_slice);
        let pred = proposals_to_mask(props, None, bag.len(), dur);
        for (&p, &t) in pred.iter().zip(&truth) {
            match (p, t) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
    }
    any.then(|| InstanceMetrics::from_counts(tp, fp, fn_))
}

/// Scores `detections` against the ground truth carried by `data`.
pub fn evaluate(detections: &[Detection], data: &Dataset, alphas: &[f64]) -> Result<EvalReport> {
    for d in detections {
        if data.bag(&d.bag_id).is_none() {
            return Err(Error::Data(format!("proposal refers to unknown bag {}", d.bag_id)));
        }
        if d.proposal.class >= data.num_classes() {
            return Err(Error::Data(format!(
                "proposal for bag {} has class {} but dataset has {} classes",
                d.bag_id,
                d.proposal.class,
                data.num_classes()
            )));
        }
    }
    for &a in alphas {
        if !(a > 0.0 && a <= 1.0) {
            return Err(Error::Config(format!("tIoU threshold {a} outside (0, 1]")));
        }
    }
    let gt = ground_truth(data);
    let c = data.num_classes();
    let (ap, map): (Vec<_>, Vec<_>) = alphas.iter().map(|&a| mean_ap(detections, &gt, c, a)).unzip();
    let avg_alphas = average_map_alphas();
    let avg_per: Vec<f64> = avg_alphas.iter().map(|&a| mean_ap(detections, &gt, c, a).1).collect();
    let average_map = avg_per.iter().sum::<f64>() / avg_per.len() as f64;
    let bags_with_proposals = detections.iter().map(|d| d.bag_id.as_str()).collect::<BTreeSet<_>>().len();
    Ok(EvalReport {
        alphas: alphas.to_vec(),
        ap,
        map,
        average_map_alphas: avg_alphas,
        average_map_per_alpha: avg_per,
        average_map,
        instance: instance_metrics(detections, data),
        proposal_count: detections.len(),
        bags_with_proposals,
        bag_count: data.len(),
    })
}

/// Plain-text report: one mAP row over the tIoU grid, the average-mAP line,
/// the per-class AP table and clip-level metrics. Values are percentages.
pub fn format_report(report: &EvalReport) -> String {
    let pct = |v: f64| format!("{:6.2}", 100.0 * v);
    let mut s = String::new();
    writeln!(s, "# temporal localization report").unwrap();
    writeln!(
        s,
        "proposals: {} over {} of {} bags",
        report.proposal_count, report.bags_with_proposals, report.bag_count
    )
    .unwrap();
    writeln!(s).unwrap();
    let mut header = String::from("tIoU     ");
    for a in &report.alphas {
        write!(header, " {a:6.2}").unwrap();
    }
    writeln!(s, "{header}").unwrap();
    let mut row = String::from("mAP (%)  ");
    for &m in &report.map {
        write!(row, " {}", pct(m)).unwrap();
    }
    writeln!(s, "{row}").unwrap();
    writeln!(
        s,
        "average mAP@[0.50:0.05:0.95] (%): {}",
        pct(report.average_map).trim()
    )
    .unwrap();
    writeln!(s).unwrap();
    writeln!(s, "per-class AP (%)").unwrap();
    let classes = report.ap.first().map_or(0, Vec::len);
    for c in 0..classes {
        let mut row = format!("class {c:<3}");
        for per_alpha in &report.ap {
            match per_alpha[c] {
                Some(v) => write!(row, " {}", pct(v)).unwrap(),
                None => write!(row, " {:>6}", "-").unwrap(),
            }
        }
        writeln!(s, "{row}").unwrap();
    }
    writeln!(s).unwrap();
    match &report.instance {
        Some(m) => writeln!(
            s,
            "instance precision {:.4} recall {:.4} f1 {:.4} (tp {} fp {} fn {})",
            m.precision, m.recall, m.f1, m.true_positives, m.false_positives, m.false_negatives
        )
        .unwrap(),
        None => writeln!(s, "instance metrics unavailable (no clip-level ground truth)").unwrap(),
    }
    s
}
