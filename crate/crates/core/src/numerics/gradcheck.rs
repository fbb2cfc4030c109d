use super::loss::bce_loss;
use super::matrix::DenseMatrix;
use super::network::ScoringNetwork;
use crate::error::{Error, Result};

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for relative errors. Central differences at `FD_STEP`
/// carry roughly 1e-11 absolute error, so gradients smaller than this are
/// compared absolutely rather than relatively.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_relative_error: f64,
}

/// Central finite differences of `loss` over a flat parameter vector.
pub fn numeric_gradient(
    params: &[f64],
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<Vec<f64>> {
    let mut work = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = work[i];
        work[i] = orig + FD_STEP;
        let plus = loss(&work)?;
        work[i] = orig - FD_STEP;
        let minus = loss(&work)?;
        work[i] = orig;
        out.push((plus - minus) / (2.0 * FD_STEP));
    }
    Ok(out)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

fn with_parameters(net: &ScoringNetwork, params: &[f64]) -> ScoringNetwork {
    let mut copy = net.clone();
    for (i, &p) in params.iter().enumerate() {
        *copy.parameter_mut(i) = p;
    }
    copy
}

/// Compares back-propagated BCE gradients of `net` on `(inputs, targets)`
/// against central finite differences.
pub fn grad_check(
    net: &ScoringNetwork,
    inputs: &DenseMatrix,
    targets: &DenseMatrix,
) -> Result<GradCheck> {
    if net.parameter_count() > 1000 {
        return Err(Error::Config(format!(
            "gradient check limited to 1000 parameters, network has {}",
            net.parameter_count()
        )));
    }
    let cache = net.forward_cached(inputs)?;
    let loss = bce_loss(cache.output(), targets, None)?;
    let analytic = net.backward(&cache, &loss.gradient)?.flatten();

    let numeric = numeric_gradient(&net.parameters(), |p| {
        let probe = with_parameters(net, p);
        Ok(bce_loss(&probe.forward(inputs)?, targets, None)?.loss)
    })?;
    let max_relative_error = max_relative_error(&analytic, &numeric);
    Ok(GradCheck {
        analytic,
        numeric,
        max_relative_error,
    })
}
