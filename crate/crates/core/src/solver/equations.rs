//! The induced-smoothed estimating function and its companions.

use nalgebra::{DMatrix, DVector};

use crate::correlation::WorkingCovariance;
use crate::error::{Error, Result};
use crate::model::{normal_cdf, normal_pdf, psi_unchecked, LongitudinalDataset, QuantileLevel};
use crate::sparsity::SparsityWeights;

/// Largest condition number accepted for the Jacobian.
pub const MAX_CONDITION: f64 = 1e12;

/// Smoothing matrix Ω and the per-observation radii r_ij = √(x_ij'Ωx_ij).
#[derive(Debug, Clone)]
pub struct SmoothingState {
    omega: DMatrix<f64>,
    radii: Vec<DVector<f64>>,
}

impl SmoothingState {
    pub fn new(dataset: &LongitudinalDataset, omega: DMatrix<f64>) -> Result<Self> {
        let p = dataset.p();
        if omega.shape() != (p, p) {
            return Err(Error::InvalidInput(format!("Ω must be {p}×{p}")));
        }
        if omega.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("Ω has non-finite entries".into()));
        }
        let radii = dataset
            .subjects()
            .iter()
            .map(|s| {
                let x = s.covariates();
                let xo = x * &omega;
                DVector::from_fn(s.len(), |j, _| xo.row(j).dot(&x.row(j)).max(0.0).sqrt())
            })
            .collect();
        Ok(Self { omega, radii })
    }

    pub fn omega(&self) -> &DMatrix<f64> {
        &self.omega
    }

    pub fn radii(&self, subject: usize) -> &DVector<f64> {
        &self.radii[subject]
    }
}

/// Ũ, G̃ = −∂Ũ/∂β and cov(Ũ) at one β.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub score: DVector<f64>,
    pub jacobian: Option<DMatrix<f64>>,
    pub meat: Option<DMatrix<f64>>,
}

#[inline]
fn smoothed_pair(u: f64, r: f64, tau: f64) -> (f64, f64) {
    if r > 0.0 {
        let z = u / r;
        (tau - normal_cdf(-z), normal_pdf(z) / r)
    } else {
        // x_ij = 0: no smoothing along this row
        (psi_unchecked(u, tau), 0.0)
    }
}

fn check_dimensions(
    dataset: &LongitudinalDataset,
    beta: &DVector<f64>,
    state: &SmoothingState,
    gamma: &SparsityWeights,
) -> Result<()> {
    if beta.len() != dataset.p() {
        return Err(Error::InvalidInput(format!("β has length {}, expected {}", beta.len(), dataset.p())));
    }
    if state.radii.len() != dataset.m() || gamma.len() != dataset.n_obs() {
        return Err(Error::InvalidInput("smoothing state or weights do not match the dataset".into()));
    }
    Ok(())
}

/// Sums the per-subject terms v_i = X_i'Γ_iΣ_i⁻¹ψ̃_i (and optionally the
/// Jacobian and Σ v_i v_i') in subject order.
pub(crate) fn evaluate(
    dataset: &LongitudinalDataset,
    beta: &DVector<f64>,
    state: &SmoothingState,
    gamma: &SparsityWeights,
    sigma: &WorkingCovariance,
    tau: QuantileLevel,
    full: bool,
) -> Result<Evaluation> {
    check_dimensions(dataset, beta, state, gamma)?;
    let p = dataset.p();
    let t = tau.value();
    let mut score = DVector::zeros(p);
    let mut jacobian = full.then(|| DMatrix::zeros(p, p));
    let mut meat = full.then(|| DMatrix::zeros(p, p));

    for (i, s) in dataset.subjects().iter().enumerate() {
        let x = s.covariates();
        let resid = s.residuals(beta);
        let radii = state.radii(i);
        let g = gamma.subject(i);
        let n = s.len();

        let mut psi = DVector::zeros(n);
        let mut lambda = DVector::zeros(n);
        for j in 0..n {
            let (a, b) = smoothed_pair(resid[j], radii[j], t);
            psi[j] = a;
            lambda[j] = b;
        }
        let mut w = sigma.solve(&psi)?;
        for j in 0..n {
            w[j] *= g[j];
        }
        let v = x.tr_mul(&w);
        score += &v;

        if let (Some(jac), Some(meat)) = (jacobian.as_mut(), meat.as_mut()) {
            let mut lx = x.clone();
            for j in 0..n {
                lx.row_mut(j).scale_mut(lambda[j]);
            }
            let mut sl = sigma.solve_matrix(&lx)?;
            for j in 0..n {
                sl.row_mut(j).scale_mut(g[j]);
            }
            *jac += x.tr_mul(&sl);
            meat.ger(1.0, &v, &v, 1.0);
        }
    }
    Ok(Evaluation {
        score,
        jacobian,
        meat,
    })
}

/// Ũ(β) = Σ_i X_i'Γ_iΣ_i⁻¹ψ̃_τ(y_i − X_iβ).
pub fn smoothed_estimating_function(
    dataset: &LongitudinalDataset,
    beta: &DVector<f64>,
    state: &SmoothingState,
    gamma: &SparsityWeights,
    sigma: &WorkingCovariance,
    tau: QuantileLevel,
) -> Result<DVector<f64>> {
    Ok(evaluate(dataset, beta, state, gamma, sigma, tau, false)?.score)
}

/// Same sum as [`smoothed_estimating_function`] with the unsmoothed ψ_τ.
pub fn estimating_function(
    dataset: &LongitudinalDataset,
    beta: &DVector<f64>,
    gamma: &SparsityWeights,
    sigma: &WorkingCovariance,
    tau: QuantileLevel,
) -> Result<DVector<f64>> {
    if beta.len() != dataset.p() || gamma.len() != dataset.n_obs() {
        return Err(Error::InvalidInput("dimension mismatch".into()));
    }
    let mut score = DVector::zeros(dataset.p());
    for (i, s) in dataset.subjects().iter().enumerate() {
        let resid = s.residuals(beta);
        let psi = resid.map(|e| psi_unchecked(e, tau.value()));
        let mut w = sigma.solve(&psi)?;
        for (wj, gj) in w.iter_mut().zip(gamma.subject(i)) {
            *wj *= gj;
        }
        score += s.covariates().tr_mul(&w);
    }
    Ok(score)
}

/// Fails when `g` is singular or its condition number exceeds [`MAX_CONDITION`].
pub fn check_conditioning(g: &DMatrix<f64>) -> Result<()> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("Jacobian has non-finite entries".into()));
    }
    let sv = g.singular_values();
    let (lo, hi) = (sv.min(), sv.max());
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::Singular(format!("Jacobian condition number {:.3e} exceeds {MAX_CONDITION:e}", hi / lo)));
    }
    Ok(())
}

/// G̃ = Σ_i X_i'Γ_iΣ_i⁻¹Λ̃_iX_i, the negated derivative of Ũ.
pub fn smoothed_jacobian(
    dataset: &LongitudinalDataset,
    beta: &DVector<f64>,
    state: &SmoothingState,
    gamma: &SparsityWeights,
    sigma: &WorkingCovariance,
    tau: QuantileLevel,
) -> Result<DMatrix<f64>> {
    let g = evaluate(dataset, beta, state, gamma, sigma, tau, true)?
        .jacobian
        .expect("full evaluation");
    check_conditioning(&g)?;
    Ok(g)
}

/// cov(Ũ) = Σ_i v_i v_i' with v_i = X_i'Γ_iΣ_i⁻¹ψ̃_i.
pub fn score_covariance(
    dataset: &LongitudinalDataset,
    beta: &DVector<f64>,
    state: &SmoothingState,
    gamma: &SparsityWeights,
    sigma: &WorkingCovariance,
    tau: QuantileLevel,
) -> Result<DMatrix<f64>> {
    Ok(evaluate(dataset, beta, state, gamma, sigma, tau, true)?
        .meat
        .expect("full evaluation"))
}

/// G⁻¹ V G⁻ᵀ, symmetrized.
pub(crate) fn sandwich(g: &DMatrix<f64>, meat: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let lu = g.clone().lu();
    let left = lu
        .solve(meat)
        .ok_or_else(|| Error::Singular("Jacobian is singular".into()))?;
    // (G⁻¹ (G⁻¹ V)ᵀ)ᵀ = G⁻¹ V G⁻ᵀ
    let full = lu
        .solve(&left.transpose())
        .ok_or_else(|| Error::Singular("Jacobian is singular".into()))?
        .transpose();
    Ok((&full + full.transpose()) * 0.5)
}
