//! Synthetic bags with planted concept segments.
//!
//! Every class owns a concept point in feature space. Clips inside a planted
//! segment are drawn around their class concept, every other clip around a
//! shared background mean, both with isotropic Gaussian noise. Negative bags
//! contain background clips only.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mil::{Bag, BagLabel, Dataset, FeatureSequence, Segment};
use crate::numerics::DenseMatrix;

pub const SEPARABLE_DEFAULT: &str = "separable-default";

/// Added to the bag seed to draw a held-out split from the same concepts.
const TEST_SPLIT_SEED_OFFSET: u64 = 0x7e57_5eed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// Explicit concept points; drawn from `concept_seed` when absent.
    #[serde(default)]
    pub concepts: Option<Vec<Vec<f64>>>,
    /// Distance of drawn concepts from the background mean.
    pub concept_norm: f64,
    pub concept_seed: u64,
    /// Defaults to the origin.
    #[serde(default)]
    pub background_mean: Option<Vec<f64>>,
    pub sigma_pos: f64,
    pub sigma_neg: f64,
    /// Inclusive clip-count range of a bag.
    pub bag_len: [usize; 2],
    pub segments_per_bag: [usize; 2],
    pub segment_len: [usize; 2],
    /// Probability that a clip inside a planted segment is drawn from the
    /// concept; each segment keeps at least one such clip.
    pub witness_rate: f64,
    /// Probability that a positive bag carries a second class.
    pub co_occurrence: f64,
    pub positive_bags: usize,
    pub negative_bags: usize,
    pub clip_duration_sec: f64,
    pub seed: u64,
    #[serde(default = "default_prefix")]
    pub id_prefix: String,
}

fn default_prefix() -> String {
    "bag".into()
}

impl SynthSpec {
    /// Three classes in 16 dimensions, 40 positive and 20 negative bags of
    /// 20-60 clips with 1-3 segments of 4-9 clips.
    pub fn separable_default(seed: u64) -> Self {
        Self {
            num_classes: 3,
            feature_dim: 16,
            concepts: None,
            concept_norm: 10.0,
            concept_seed: seed,
            background_mean: None,
            sigma_pos: 0.5,
            sigma_neg: 0.5,
            bag_len: [20, 60],
            segments_per_bag: [1, 3],
            segment_len: [4, 9],
            witness_rate: 1.0,
            co_occurrence: 0.25,
            positive_bags: 40,
            negative_bags: 20,
            clip_duration_sec: 1.25,
            seed,
            id_prefix: default_prefix(),
        }
    }

    pub fn preset(name: &str, seed: u64) -> Result<Self> {
        match name {
            SEPARABLE_DEFAULT => Ok(Self::separable_default(seed)),
            other => Err(Error::Config(format!(
                "unknown preset {other:?} (available: {SEPARABLE_DEFAULT})"
            ))),
        }
    }

    /// Same concepts, different bags.
    pub fn test_split(&self) -> Self {
        Self {
            seed: self.seed.wrapping_add(TEST_SPLIT_SEED_OFFSET),
            id_prefix: format!("{}_test", self.id_prefix),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.num_classes == 0 {
            return bad("num_classes", "must be at least 1".into());
        }
        if self.feature_dim == 0 {
            return bad("feature_dim", "must be at least 1".into());
        }
        for (name, [lo, hi]) in [
            ("bag_len", self.bag_len),
            ("segments_per_bag", self.segments_per_bag),
            ("segment_len", self.segment_len),
        ] {
            if lo == 0 || lo > hi {
                return bad(name, format!("invalid range [{lo}, {hi}]"));
            }
        }
        if self.segment_len[1] > self.bag_len[0] {
            return bad(
                "segment_len",
                format!(
                    "longest segment ({}) exceeds shortest bag ({})",
                    self.segment_len[1], self.bag_len[0]
                ),
            );
        }
        if self.num_classes > 1 && self.co_occurrence > 0.0 && 2 * self.segment_len[1] + 1 > self.bag_len[0] {
            return bad(
                "bag_len",
                "shortest bag cannot hold two separated segments for co-occurring classes".into(),
            );
        }
        for (name, v) in [
            ("sigma_pos", self.sigma_pos),
            ("sigma_neg", self.sigma_neg),
            ("concept_norm", self.concept_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(name, format!("must be finite and >= 0, got {v}"));
            }
        }
        if !(self.witness_rate > 0.0 && self.witness_rate <= 1.0) {
            return bad("witness_rate", format!("must lie in (0, 1], got {}", self.witness_rate));
        }
        if !(0.0..=1.0).contains(&self.co_occurrence) {
            return bad("co_occurrence", format!("must lie in [0, 1], got {}", self.co_occurrence));
        }
        if !(self.clip_duration_sec > 0.0 && self.clip_duration_sec.is_finite()) {
            return bad("clip_duration_sec", "must be positive".into());
        }
        if let Some(c) = &self.concepts {
            if c.len() != self.num_classes || c.iter().any(|v| v.len() != self.feature_dim) {
                return bad("concepts", format!("expected {} vectors of length {}", self.num_classes, self.feature_dim));
            }
        }
        if let Some(b) = &self.background_mean {
            if b.len() != self.feature_dim {
                return bad("background_mean", format!("expected length {}", self.feature_dim));
            }
        }
        if self.id_prefix.is_empty() || !self.id_prefix.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
            return bad("id_prefix", "must be non-empty [A-Za-z0-9_-]".into());
        }
        Ok(())
    }

    pub fn background(&self) -> Vec<f64> {
        self.background_mean.clone().unwrap_or_else(|| vec![0.0; self.feature_dim])
    }

    /// Concept points: explicit ones, or directions drawn from `concept_seed`
    /// (orthogonalized when `C <= d`) at `concept_norm` from the background.
    pub fn concept_points(&self) -> Vec<Vec<f64>> {
        if let Some(c) = &self.concepts {
            return c.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.concept_seed);
        rng.set_stream(7);
        let d = self.feature_dim;
        let mut dirs: Vec<Vec<f64>> = Vec::with_capacity(self.num_classes);
        while dirs.len() < self.num_classes {
            let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
            if self.num_classes <= d {
                for u in &dirs {
                    let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                    for (vi, ui) in v.iter_mut().zip(u) {
                        *vi -= dot * ui;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-6 {
                continue;
            }
            dirs.push(v.into_iter().map(|x| x / norm).collect());
        }
        let bg = self.background();
        dirs.into_iter()
            .map(|u| u.iter().zip(&bg).map(|(ui, b)| b + self.concept_norm * ui).collect())
            .collect()
    }

    /// Every concept lies farther than `4 * max(sigma_pos, sigma_neg)` from the
    /// background mean.
    pub fn is_separable(&self) -> bool {
        let bg = self.background();
        let spread = 4.0 * self.sigma_pos.max(self.sigma_neg);
        self.concept_points().iter().all(|c| distance(c, &bg) > spread)
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn draw_point(rng: &mut ChaCha8Rng, center: &[f64], sigma: f64) -> Vec<f64> {
    center
        .iter()
        .map(|&m| {
            let n: f64 = rng.sample(StandardNormal);
            // stored as f32 on disk; keep generated values exactly representable
            (m + sigma * n) as f32 as f64
        })
        .collect()
}

/// Splits `slack` extra clips into `parts` random non-negative gaps.
fn random_gaps(rng: &mut ChaCha8Rng, slack: usize, parts: usize) -> Vec<usize> {
    let mut cuts: Vec<usize> = (0..parts - 1).map(|_| rng.random_range(0..=slack)).collect();
    cuts.sort_unstable();
    let mut gaps = Vec::with_capacity(parts);
    let mut prev = 0;
    for c in cuts {
        gaps.push(c - prev);
        prev = c;
    }
    gaps.push(slack - prev);
    gaps
}

/// Planted segments as `(class, start_clip, end_clip)`, non-overlapping and
/// separated by at least one background clip.
fn plant_segments(rng: &mut ChaCha8Rng, spec: &SynthSpec, classes: &[usize], len: usize) -> Result<Vec<(usize, usize, usize)>> {
    let [smin, smax] = spec.segments_per_bag;
    let lo = smin.max(classes.len());
    let mut k = rng.random_range(lo..=smax.max(lo));
    let [lmin, lmax] = spec.segment_len;
    let mut lengths: Vec<usize> = (0..k).map(|_| rng.random_range(lmin..=lmax)).collect();
    while lengths.iter().sum::<usize>() + k - 1 > len && k > classes.len() {
        k -= 1;
        lengths.pop();
    }
    let used = lengths.iter().sum::<usize>() + k - 1;
    if used > len {
        return Err(Error::Config(format!(
            "cannot place {k} segments in a bag of {len} clips"
        )));
    }
    let mut seg_classes: Vec<usize> = classes.to_vec();
    while seg_classes.len() < k {
        seg_classes.push(classes[rng.random_range(0..classes.len())]);
    }
    seg_classes.shuffle(rng);

    let gaps = random_gaps(rng, len - used, k + 1);
    let mut out = Vec::with_capacity(k);
    let mut pos = gaps[0];
    for i in 0..k {
        out.push((seg_classes[i], pos, pos + lengths[i]));
        pos += lengths[i] + 1 + gaps[i + 1];
    }
    Ok(out)
}

/// Draws the dataset described by `spec`; deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<Dataset> {
    spec.validate()?;
    let concepts = spec.concept_points();
    let background = spec.background();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut kinds: Vec<bool> = std::iter::repeat_n(true, spec.positive_bags)
        .chain(std::iter::repeat_n(false, spec.negative_bags))
        .collect();
    kinds.shuffle(&mut rng);

    let dur = spec.clip_duration_sec;
    let mut bags = Vec::with_capacity(kinds.len());
    for (i, positive) in kinds.into_iter().enumerate() {
        let len = rng.random_range(spec.bag_len[0]..=spec.bag_len[1]);
        let mut classes = Vec::new();
        let mut planted = Vec::new();
        if positive {
            let first = rng.random_range(0..spec.num_classes);
            classes.push(first);
            if spec.num_classes > 1 && rng.random_bool(spec.co_occurrence) {
                let mut second = rng.random_range(0..spec.num_classes - 1);
                if second >= first {
                    second += 1;
                }
                classes.push(second);
            }
            classes.sort_unstable();
            planted = plant_segments(&mut rng, spec, &classes, len)?;
        }

        let mut owner: Vec<Option<usize>> = vec![None; len];
        let mut witness = vec![false; len];
        for &(c, s, e) in &planted {
            for t in s..e {
                owner[t] = Some(c);
                witness[t] = rng.random_bool(spec.witness_rate);
            }
            if !witness[s..e].contains(&true) {
                witness[rng.random_range(s..e)] = true;
            }
        }

        let mut data = Vec::with_capacity(len * spec.feature_dim);
        for t in 0..len {
            let point = match owner[t] {
                Some(c) if witness[t] => draw_point(&mut rng, &concepts[c], spec.sigma_pos),
                _ => draw_point(&mut rng, &background, spec.sigma_neg),
            };
            data.extend(point);
        }
        let id = format!("{}_{i:04}", spec.id_prefix);
        let features = DenseMatrix::from_vec(len, spec.feature_dim, data)?;
        let segments = planted
            .iter()
            .map(|&(c, s, e)| Segment::new(c, s as f64 * dur, e as f64 * dur))
            .collect::<Result<Vec<_>>>()?;
        bags.push(Bag {
            sequence: FeatureSequence::new(id, features, dur)?,
            label: BagLabel::from_classes(spec.num_classes, &classes)?,
            segments: Some(segments),
            key_instances: Some(witness),
        });
    }
    Dataset::new(spec.num_classes, spec.feature_dim, bags)
}

/// Per-clip planted class (`None` for background) of a generated bag.
pub fn clip_classes(bag: &Bag) -> Vec<Option<usize>> {
    let dur = bag.sequence.clip_duration_sec();
    let z = bag.key_instances.clone().unwrap_or_else(|| vec![true; bag.len()]);
    let mut out = vec![None; bag.len()];
    for s in bag.segments.iter().flatten() {
        let start = (s.start_sec / dur).round() as usize;
        let end = ((s.end_sec / dur).round() as usize).min(bag.len());
        for t in start..end {
            if z[t] {
                out[t] = Some(s.class);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_preset_shape() {
        let spec = SynthSpec::separable_default(1);
        assert!(spec.is_separable());
        let data = generate(&spec).unwrap();
        assert_eq!(data.len(), 60);
        assert_eq!(data.positive_count(), 40);
        assert_eq!(data.feature_dim(), 16);
        for bag in data.bags() {
            assert!((20..=60).contains(&bag.len()));
        }
    }

    #[test]
    fn witness_rate_one_single_class() {
        let spec = SynthSpec {
            num_classes: 1,
            ..SynthSpec::separable_default(3)
        };
        let data = generate(&spec).unwrap();
        for bag in data.bags() {
            let z = bag.key_instances.as_ref().unwrap();
            if bag.label.is_positive() {
                assert!(z.contains(&true));
                assert_eq!(clip_classes(bag).iter().filter(|c| c.is_some()).count(), z.iter().filter(|&&v| v).count());
            } else {
                assert!(!z.contains(&true));
                assert!(bag.segments.as_ref().unwrap().is_empty());
            }
        }
    }

    #[test]
    fn low_witness_rate_keeps_one_witness_per_segment() {
        let spec = SynthSpec {
            witness_rate: 0.05,
            ..SynthSpec::separable_default(8)
        };
        let data = generate(&spec).unwrap();
        for bag in data.bags() {
            let z = bag.key_instances.as_ref().unwrap();
            for s in bag.segments.as_ref().unwrap() {
                let a = (s.start_sec / 1.25).round() as usize;
                let b = (s.end_sec / 1.25).round() as usize;
                assert!(z[a..b].contains(&true));
            }
        }
    }

    #[test]
    fn same_seed_same_data() {
        let a = generate(&SynthSpec::separable_default(5)).unwrap();
        let b = generate(&SynthSpec::separable_default(5)).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthSpec::separable_default(6)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn test_split_shares_concepts() {
        let spec = SynthSpec::separable_default(5);
        let test = spec.test_split();
        assert_eq!(spec.concept_points(), test.concept_points());
        assert_ne!(generate(&spec).unwrap(), generate(&test).unwrap());
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let spec = SynthSpec {
            segment_len: [4, 30],
            ..SynthSpec::separable_default(1)
        };
        let err = generate(&spec).unwrap_err();
        assert!(err.to_string().contains("segment_len"));
        let spec = SynthSpec {
            witness_rate: 0.0,
            ..SynthSpec::separable_default(1)
        };
        assert!(generate(&spec).unwrap_err().to_string().contains("witness_rate"));
        assert!(SynthSpec::preset("nope", 1).is_err());
    }

    #[test]
    fn segments_are_disjoint_and_separated() {
        let data = generate(&SynthSpec::separable_default(12)).unwrap();
        for bag in data.bags() {
            let mut segs = bag.segments.clone().unwrap();
            segs.sort_by(|a, b| a.start_sec.total_cmp(&b.start_sec));
            for w in segs.windows(2) {
                assert!(w[0].end_sec < w[1].start_sec);
            }
            for s in &segs {
                assert!(s.end_sec <= bag.len() as f64 * 1.25 + 1e-9);
                assert!(bag.label.has(s.class));
            }
            for c in bag.label.classes() {
                assert!(segs.iter().any(|s| s.class == c));
            }
        }
    }
}
