use nalgebra::DMatrix;

use super::equations::{check_conditioning, evaluate, sandwich};
use super::FitContext;
use crate::error::{Error, Result};
use crate::model::{normal_quantile, FitResult, LongitudinalDataset};

/// Sandwich covariance Ĝ⁻¹ Ṽ Ĝ⁻ᵀ of β̂, evaluated at the fitted β and smoothing state.
///
/// At convergence this reproduces the final Ω of the iteration.
pub fn sandwich_covariance(dataset: &LongitudinalDataset, context: &FitContext) -> Result<DMatrix<f64>> {
    let eval = evaluate(
        dataset,
        &context.beta,
        &context.state,
        &context.gamma,
        &context.covariance,
        context.tau,
        true,
    )?;
    let g = eval.jacobian.expect("full evaluation");
    check_conditioning(&g)?;
    sandwich(&g, &eval.meat.expect("full evaluation"))
}

/// Wald intervals β̂_k ± z_{(1+level)/2} SE_k.
pub fn confidence_intervals(fit: &FitResult, level: f64) -> Result<Vec<(f64, f64)>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::InvalidInput(format!("confidence level {level} outside (0, 1)")));
    }
    let z = normal_quantile(0.5 * (1.0 + level));
    Ok(fit
        .beta
        .iter()
        .zip(fit.std_errors.iter())
        .map(|(&b, &se)| (b - z * se, b + z * se))
        .collect())
}
