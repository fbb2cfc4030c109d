use super::matrix::DenseMatrix;
use crate::error::{Error, Result};

/// Predictions are clamped to `[BCE_EPSILON, 1 - BCE_EPSILON]` before the log.
pub const BCE_EPSILON: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    /// dL/d predictions, same shape as the predictions.
    pub gradient: DenseMatrix,
}

/// Mean binary cross-entropy over the unmasked entries.
///
/// A fully zero mask yields loss 0 with a zero gradient. Entries whose
/// prediction lies outside the clamp interval get a zero gradient, the exact
/// derivative of the clamped loss.
pub fn bce_loss(
    predictions: &DenseMatrix,
    targets: &DenseMatrix,
    mask: Option<&DenseMatrix>,
) -> Result<LossOutput> {
    if predictions.shape() != targets.shape() {
        return Err(Error::Config(format!(
            "predictions {:?} and targets {:?} differ in shape",
            predictions.shape(),
            targets.shape()
        )));
    }
    if let Some(m) = mask {
        if m.shape() != predictions.shape() {
            return Err(Error::Config(format!(
                "mask {:?} does not match predictions {:?}",
                m.shape(),
                predictions.shape()
            )));
        }
    }

    let weight = |i: usize| mask.map_or(1.0, |m| m.as_slice()[i]);
    let count: f64 = (0..predictions.len()).map(weight).sum();
    let (rows, cols) = predictions.shape();
    let mut gradient = DenseMatrix::zeros(rows, cols);
    if count == 0.0 {
        return Ok(LossOutput {
            loss: 0.0,
            gradient,
        });
    }

    let mut total = 0.0;
    let p_all = predictions.as_slice();
    let t_all = targets.as_slice();
    let g_all = gradient.as_mut_slice();
    for i in 0..p_all.len() {
        let w = weight(i);
        if w == 0.0 {
            continue;
        }
        let (p_raw, t) = (p_all[i], t_all[i]);
        let p = p_raw.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
        total += w * -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
        if p == p_raw {
            g_all[i] = w * (p - t) / (p * (1.0 - p)) / count;
        }
    }
    Ok(LossOutput {
        loss: total / count,
        gradient,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct scalar form of the loss, written independently of `bce_loss`.
    fn reference(p: &[f64], t: &[f64]) -> f64 {
        let n = p.len() as f64;
        p.iter()
            .zip(t)
            .map(|(&p, &t)| {
                let p = p.max(1e-7).min(1.0 - 1e-7);
                if t == 1.0 {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum::<f64>()
            / n
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        let ones = DenseMatrix::filled(3, 2, 1.0);
        let out = bce_loss(&ones, &ones, None).unwrap();
        assert!(out.loss <= 1e-6);
        assert!(out.loss.is_finite());
    }

    #[test]
    fn half_against_one_is_ln2() {
        let p = DenseMatrix::filled(1, 1, 0.5);
        let t = DenseMatrix::filled(1, 1, 1.0);
        let out = bce_loss(&p, &t, None).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((out.gradient.get(0, 0) + 2.0).abs() < 1e-12);
    }

    #[test]
    fn random_case_matches_reference_and_finite_differences() {
        let p = DenseMatrix::from_rows(&[[0.13, 0.77], [0.52, 0.91], [0.305, 0.04]]).unwrap();
        let t = DenseMatrix::from_rows(&[[0.0, 1.0], [1.0, 1.0], [0.0, 0.0]]).unwrap();
        let out = bce_loss(&p, &t, None).unwrap();
        assert!((out.loss - reference(p.as_slice(), t.as_slice())).abs() < 1e-12);

        let h = 1e-5;
        for i in 0..p.len() {
            let mut plus = p.clone();
            plus.as_mut_slice()[i] += h;
            let mut minus = p.clone();
            minus.as_mut_slice()[i] -= h;
            let fd = (reference(plus.as_slice(), t.as_slice())
                - reference(minus.as_slice(), t.as_slice()))
                / (2.0 * h);
            let g = out.gradient.as_slice()[i];
            assert!((g - fd).abs() / g.abs().max(fd.abs()) < 1e-4, "{g} vs {fd}");
        }
    }

    #[test]
    fn masked_entries_ignored() {
        let p = DenseMatrix::from_rows(&[[0.5, 0.9]]).unwrap();
        let t = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let m = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let out = bce_loss(&p, &t, Some(&m)).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(out.gradient.get(0, 1), 0.0);

        let empty = DenseMatrix::zeros(1, 2);
        let out = bce_loss(&p, &t, Some(&empty)).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(out.gradient.as_slice().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn extreme_predictions_stay_finite() {
        let p = DenseMatrix::from_rows(&[[0.0, 1.0]]).unwrap();
        let t = DenseMatrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let out = bce_loss(&p, &t, None).unwrap();
        assert!(out.loss.is_finite() && out.loss > 0.0);
        assert!(out.gradient.all_finite());
    }

    #[test]
    fn shape_mismatch_errors() {
        let p = DenseMatrix::zeros(2, 2);
        let t = DenseMatrix::zeros(2, 1);
        assert!(bce_loss(&p, &t, None).is_err());
        assert!(bce_loss(&p, &p, Some(&t)).is_err());
    }
}
