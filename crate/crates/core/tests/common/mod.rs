//! Reference implementations shared by the oracle tests and the acceptance
//! suite. Written directly from the rule definitions, without calling the
//! library code they check.
#![allow(dead_code)]

use emmil::attention::{attention_bag_loss, AttentionNetwork};
use emmil::evaluation::GroundTruth;
use emmil::inference::{Detection, Proposal};
use emmil::mil::{e_step_pseudo_labels, m_step_pseudo_labels, BagLabel, Segment};
use emmil::numerics::gradcheck::relative_error;
use emmil::numerics::{bce_loss, Activation, DenseMatrix, ScoringNetwork};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Either a grid value `k/64` (exact in binary, so ties and exact-threshold
/// cases happen) or a continuous value, both inside (0, 1).
pub fn random_score<R: Rng>(rng: &mut R, grid: bool) -> f64 {
    if grid {
        f64::from(rng.random_range(1u32..64)) / 64.0
    } else {
        rng.random_range(0.001..0.999)
    }
}

pub struct PseudoLabelCase {
    pub p: Vec<Vec<f64>>,
    pub q: Vec<f64>,
    pub y: Vec<u8>,
    pub gamma: f64,
}

pub fn random_pseudo_label_case<R: Rng>(rng: &mut R) -> PseudoLabelCase {
    let t = rng.random_range(1..=16);
    let c = rng.random_range(1..=4);
    let grid = rng.random_bool(0.5);
    let constant = rng.random_bool(0.1);
    let mut p: Vec<Vec<f64>> = (0..t).map(|_| (0..c).map(|_| random_score(rng, grid)).collect()).collect();
    let mut q: Vec<f64> = (0..t).map(|_| random_score(rng, grid)).collect();
    if constant {
        let v = random_score(rng, true);
        p.iter_mut().flatten().for_each(|x| *x = v);
        q.iter_mut().for_each(|x| *x = v);
    }
    let y = (0..c).map(|_| u8::from(rng.random_bool(0.4))).collect();
    let gamma = [0.0, 0.15, 0.25, 0.5, rng.random_range(0.0..1.0)][rng.random_range(0..5)];
    PseudoLabelCase { p, q, y, gamma }
}

/// `z[t] = 1` iff some labeled class has `P[t][c]` above its column mean;
/// a positive bag with no such clip marks its best clip (earliest on ties).
pub fn brute_e_step(p: &[Vec<f64>], y: &[u8]) -> Vec<u8> {
    let t_len = p.len();
    let mut z = vec![0u8; t_len];
    if y.iter().all(|&v| v == 0) {
        return z;
    }
    for (c, &yc) in y.iter().enumerate() {
        if yc == 0 {
            continue;
        }
        let mut total = 0.0;
        for row in p {
            total += row[c];
        }
        let mean = total / t_len as f64;
        for t in 0..t_len {
            if p[t][c] > mean {
                z[t] = 1;
            }
        }
    }
    if z.iter().all(|&v| v == 0) {
        let score = |t: usize| {
            let mut best = f64::NEG_INFINITY;
            for (c, &yc) in y.iter().enumerate() {
                if yc == 1 && p[t][c] > best {
                    best = p[t][c];
                }
            }
            best
        };
        let top = (0..t_len).map(score).fold(f64::NEG_INFINITY, f64::max);
        let first = (0..t_len).find(|&t| score(t) == top).unwrap();
        z[first] = 1;
    }
    z
}

/// `y_hat[t][c] = 1` iff `y_c = 1` and `Q[t] > mean + gamma * (max - min)`;
/// a positive bag with no such clip marks its highest-`Q` clip.
pub fn brute_m_step(q: &[f64], y: &[u8], gamma: f64) -> Vec<Vec<u8>> {
    let t_len = q.len();
    let mut out = vec![vec![0u8; y.len()]; t_len];
    if y.iter().all(|&v| v == 0) {
        return out;
    }
    let mut total = 0.0;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in q {
        total += v;
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let threshold = total / t_len as f64 + gamma * (hi - lo);
    let mut keys: Vec<usize> = (0..t_len).filter(|&t| q[t] > threshold).collect();
    if keys.is_empty() {
        keys.push((0..t_len).find(|&t| q[t] == hi).unwrap());
    }
    for t in keys {
        for (c, &yc) in y.iter().enumerate() {
            out[t][c] = yc;
        }
    }
    out
}

/// Runs both library generators on a case and reports whether they agree with
/// the brute-force versions.
pub fn pseudo_labels_agree(case: &PseudoLabelCase) -> bool {
    let p = DenseMatrix::from_rows(&case.p).unwrap();
    let y = BagLabel::new(case.y.clone()).unwrap();
    let z: Vec<u8> = e_step_pseudo_labels(&p, &y).into_iter().map(u8::from).collect();
    let y_hat = m_step_pseudo_labels(&case.q, &y, case.gamma);
    let y_hat: Vec<Vec<u8>> = (0..y_hat.rows())
        .map(|t| y_hat.row(t).iter().map(|&v| v as u8).collect())
        .collect();
    z == brute_e_step(&case.p, &case.y) && y_hat == brute_m_step(&case.q, &case.y, case.gamma)
}

pub fn reference_tiou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// AP for `class` by explicit enumeration: rank by (confidence desc, input
/// index), match greedily to the best unmatched same-bag segment, then sum
/// over each true positive the highest precision reached at or after it.
pub fn reference_ap(dets: &[Detection], gt: &[GroundTruth], class: usize, alpha: f64) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gt.iter().filter(|g| g.segment.class == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<(usize, &Detection)> =
        dets.iter().enumerate().filter(|(_, d)| d.proposal.class == class).collect();
    ranked.sort_by(|a, b| {
        b.1.proposal
            .confidence
            .partial_cmp(&a.1.proposal.confidence)
            .unwrap()
            .then(a.0.cmp(&b.0))
    });
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::new();
    for (_, d) in &ranked {
        let mut pick: Option<usize> = None;
        let mut pick_iou = -1.0;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] || g.bag_id != d.bag_id {
                continue;
            }
            let iou = reference_tiou(
                (d.proposal.start_sec, d.proposal.end_sec),
                (g.segment.start_sec, g.segment.end_sec),
            );
            if iou >= alpha && iou > pick_iou {
                pick = Some(j);
                pick_iou = iou;
            }
        }
        if let Some(j) = pick {
            taken[j] = true;
        }
        hits.push(pick.is_some());
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    let mut ap = 0.0;
    for k in 0..hits.len() {
        if hits[k] {
            let best_after = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += best_after / gts.len() as f64;
        }
    }
    Some(ap)
}

/// Up to 6 detections and 3 ground-truth segments on an integer time grid,
/// spread over two bags and two classes.
pub fn random_ap_case<R: Rng>(rng: &mut R) -> (Vec<Detection>, Vec<GroundTruth>, f64) {
    let n_gt = rng.random_range(1..=3);
    let n_det = rng.random_range(0..=6);
    let gt: Vec<GroundTruth> = (0..n_gt)
        .map(|_| {
            let s = rng.random_range(0..12);
            let l = rng.random_range(1..6);
            GroundTruth {
                bag_id: format!("b{}", rng.random_range(0..2)),
                segment: Segment::new(rng.random_range(0..2), f64::from(s), f64::from(s + l)).unwrap(),
            }
        })
        .collect();
    let dets: Vec<Detection> = (0..n_det)
        .map(|_| {
            let s = rng.random_range(0..12);
            let l = rng.random_range(1..6);
            Detection {
                bag_id: format!("b{}", rng.random_range(0..2)),
                proposal: Proposal {
                    class: rng.random_range(0..2),
                    start_sec: f64::from(s),
                    end_sec: f64::from(s + l),
                    confidence: f64::from(rng.random_range(0..4)) / 4.0,
                },
            }
        })
        .collect();
    let alpha = [0.1, 0.3, 0.5, 0.7, rng.random_range(0.05..1.0)][rng.random_range(0..5)];
    (dets, gt, alpha)
}

fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> DenseMatrix {
    let v = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    DenseMatrix::from_vec(rows, cols, v).unwrap()
}

fn fd_gradient(params: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let h = 1e-5;
    let mut w = params.to_vec();
    (0..w.len())
        .map(|i| {
            let orig = w[i];
            w[i] = orig + h;
            let plus = loss(&w);
            w[i] = orig - h;
            let minus = loss(&w);
            w[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

fn set_params(net: &mut ScoringNetwork, params: &[f64]) {
    for (i, &p) in params.iter().enumerate() {
        *net.parameter_mut(i) = p;
    }
}

fn worst(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max)
}

/// Draws networks until no hidden ReLU input lies within `1e-3` of zero on
/// `x`, so central differences never straddle a kink.
fn smooth_net<R: Rng>(rng: &mut R, dims: &[usize], output: Activation, x: &DenseMatrix) -> ScoringNetwork {
    loop {
        let net = ScoringNetwork::with_output_activation(dims, output, rng).unwrap();
        let l = &net.layers()[0];
        let clear = (0..x.rows()).all(|r| {
            (0..l.bias.len()).all(|j| {
                let z = l.bias[j] + x.row(r).iter().enumerate().map(|(k, v)| l.weights.get(j, k) * v).sum::<f64>();
                z.abs() > 1e-3
            })
        });
        if clear {
            return net;
        }
    }
}

fn masked_loss_gradient(net: &ScoringNetwork, x: &DenseMatrix, targets: &DenseMatrix) -> (Vec<f64>, Vec<f64>) {
    let mask = DenseMatrix::filled(targets.rows(), targets.cols(), 1.0);
    let cache = net.forward_cached(x).unwrap();
    let loss = bce_loss(cache.output(), targets, Some(&mask)).unwrap();
    let analytic = net.backward(&cache, &loss.gradient).unwrap().flatten();
    let mut probe = net.clone();
    let numeric = fd_gradient(&net.parameters(), |w| {
        set_params(&mut probe, w);
        bce_loss(&probe.forward(x).unwrap(), targets, Some(&mask)).unwrap().loss
    });
    (analytic, numeric)
}

/// Worst relative error of the assignment-branch loss, the classifier-branch
/// loss and the attention-pooling loss on one random small instance.
pub fn gradient_trial<R: Rng>(rng: &mut R) -> [f64; 3] {
    let d = rng.random_range(2..=5);
    let c = rng.random_range(1..=3);
    let t = rng.random_range(2..=7);
    let hidden = rng.random_range(2..=6);
    let x = random_matrix(rng, t, d);

    let scores = DenseMatrix::from_vec(t, c, (0..t * c).map(|_| rng.random_range(0.01..0.99)).collect()).unwrap();
    let q: Vec<f64> = (0..t).map(|_| rng.random_range(0.01..0.99)).collect();
    let mut labels: Vec<u8> = (0..c).map(|_| u8::from(rng.random_bool(0.5))).collect();
    labels[0] = 1;
    let y = BagLabel::new(labels).unwrap();

    let assigner = smooth_net(rng, &[d, hidden, 1], Activation::Sigmoid, &x);
    let z: Vec<f64> = e_step_pseudo_labels(&scores, &y).into_iter().map(|b| f64::from(u8::from(b))).collect();
    let (a, n) = masked_loss_gradient(&assigner, &x, &DenseMatrix::column_vector(&z));
    let e_err = worst(&a, &n);

    let classifier = smooth_net(rng, &[d, hidden, c], Activation::Sigmoid, &x);
    let y_hat = m_step_pseudo_labels(&q, &y, 0.15);
    let (a, n) = masked_loss_gradient(&classifier, &x, &y_hat);
    let m_err = worst(&a, &n);

    let net = AttentionNetwork {
        classifier: smooth_net(rng, &[d, hidden, c], Activation::Sigmoid, &x),
        attention: smooth_net(rng, &[d, hidden, 1], Activation::Identity, &x),
    };
    let out = attention_bag_loss(&net, &x, &y).unwrap();
    let mut probe = net.clone();
    let nc = net.classifier.parameter_count();
    let mut params = net.classifier.parameters();
    params.extend(net.attention.parameters());
    let numeric = fd_gradient(&params, |w| {
        set_params(&mut probe.classifier, &w[..nc]);
        set_params(&mut probe.attention, &w[nc..]);
        attention_bag_loss(&probe, &x, &y).unwrap().loss
    });
    let mut analytic = out.classifier_grads.flatten();
    analytic.extend(out.attention_grads.flatten());
    let a_err = worst(&analytic, &numeric);

    [e_err, m_err, a_err]
}
