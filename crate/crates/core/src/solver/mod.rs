//! Newton–Raphson solution of the smoothed estimating equations.
//!
//! Each outer iteration evaluates Ũ, G̃ and cov(Ũ) at the current (β, Ω),
//! takes a (possibly halved) Newton step for β and replaces Ω with
//! G̃⁻¹ cov(Ũ) G̃⁻ᵀ. For the correlated estimators the lag correlations and
//! score variances are re-estimated from the current β before the
//! evaluation.

mod equations;
mod inference;
mod refine;

use nalgebra::{DMatrix, DVector};

pub use equations::{
    check_conditioning, estimating_function, score_covariance, smoothed_estimating_function, smoothed_jacobian,
    Evaluation, SmoothingState, MAX_CONDITION,
};
pub use inference::{confidence_intervals, sandwich_covariance};

use crate::correlation::{
    assemble_working_covariance, estimated_covariance, independence_covariance, sigma_constant, sigma_empirical,
    stationary_covariance, LagCorrelations, RegularizedCorrelation, ScoreVariances, WorkingCovariance,
};
use crate::error::{Error, Result};
use crate::model::{FitResult, LongitudinalDataset, Method, QuantileLevel};
use crate::sparsity::{estimate_sparsity_hk, hall_sheather_bandwidth, identity_sparsity, GammaMode, SparsityWeights};

/// Maximum number of step halvings per Newton update.
const MAX_HALVINGS: usize = 20;

/// Smallest relaxation weight for the Ω update.
const MIN_OMEGA_RELAXATION: f64 = 1.0 / 64.0;

/// Largest factor by which tr(Ω) may shrink or grow in one iteration.
const MAX_OMEGA_SCALE_STEP: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SolverConfig {
    pub max_outer_iterations: usize,
    /// Sup-norm bound on the final β step.
    pub beta_tolerance: f64,
    /// Bound on ‖Ω_new − Ω‖_F / ‖Ω‖_F.
    pub omega_tolerance: f64,
    /// Re-estimate ρ̂ (and σ̂ for AQR) every outer iteration instead of once at the start.
    pub rho_refresh: bool,
    pub gamma_mode: GammaMode,
    /// Polish working-independence fits to an exact check-loss minimizer.
    pub exact_wi: bool,
    /// Force all lag correlations to zero in the correlated estimators.
    pub force_independence: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_outer_iterations: 100,
            beta_tolerance: 1e-8,
            omega_tolerance: 1e-6,
            rho_refresh: true,
            gamma_mode: GammaMode::Hk,
            exact_wi: true,
            force_independence: false,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_outer_iterations == 0 {
            return Err(Error::Config("max_outer_iterations must be at least 1".into()));
        }
        if !(self.beta_tolerance > 0.0) || !(self.omega_tolerance > 0.0) {
            return Err(Error::Config("tolerances must be positive".into()));
        }
        Ok(())
    }
}

/// Everything needed to re-evaluate the estimating equations at a fitted β.
#[derive(Debug, Clone)]
pub struct FitContext {
    pub beta: DVector<f64>,
    pub state: SmoothingState,
    pub gamma: SparsityWeights,
    pub covariance: WorkingCovariance,
    pub tau: QuantileLevel,
}

/// Checks N > p and full column rank of the stacked design.
pub fn check_design(dataset: &LongitudinalDataset) -> Result<()> {
    let p = dataset.p();
    let n = dataset.n_obs();
    if n <= p {
        return Err(Error::InsufficientData(format!("{n} observations for {p} coefficients")));
    }
    let sv = dataset.stacked_design().singular_values();
    let tol = sv.max() * (n.max(p) as f64) * f64::EPSILON;
    let rank = sv.iter().filter(|&&s| s > tol).count();
    if rank < p {
        return Err(Error::RankDeficient { rank, p });
    }
    Ok(())
}

fn least_squares_start(dataset: &LongitudinalDataset) -> Result<DVector<f64>> {
    let x = dataset.stacked_design();
    let y = dataset.stacked_responses();
    let xtx = x.tr_mul(&x);
    let xty = x.tr_mul(&y);
    xtx.cholesky()
        .map(|c| c.solve(&xty))
        .ok_or(Error::RankDeficient { rank: 0, p: dataset.p() })
}

#[derive(Clone, Copy)]
enum Weighting<'a> {
    Independence,
    Stationary { empirical: bool, gamma: &'a SparsityWeights },
}

struct NewtonOutcome {
    context: FitContext,
    omega: DMatrix<f64>,
    iterations: usize,
    converged: bool,
}

fn working_covariance(
    dataset: &LongitudinalDataset,
    beta: &DVector<f64>,
    tau: QuantileLevel,
    empirical: bool,
    config: &SolverConfig,
) -> Result<WorkingCovariance> {
    let occasions = dataset.max_occasions();
    let sigma = if empirical {
        sigma_empirical(dataset, beta, tau)?
    } else {
        ScoreVariances::constant(sigma_constant(tau), occasions)?
    };
    if config.force_independence {
        return uncorrelated_covariance(dataset, &sigma);
    }
    estimated_covariance(dataset, beta, tau, &sigma)
}

fn uncorrelated_covariance(dataset: &LongitudinalDataset, sigma: &ScoreVariances) -> Result<WorkingCovariance> {
    let occasions = dataset.max_occasions();
    let c = RegularizedCorrelation {
        matrix: DMatrix::identity(occasions, occasions),
        shrinkage: 0.0,
    };
    let rho = LagCorrelations::zeros(occasions.saturating_sub(1));
    assemble_working_covariance(sigma, &c, &rho, dataset.subjects().iter().map(|s| s.len()))
}

/// ρ̂ and σ̂ are step functions of β, so the joint iteration can settle into a
/// cycle in which a residual flips sign back and forth. When a refreshed
/// state repeats a non-adjacent earlier one, the covariance is frozen at the
/// average over the cycle.
#[derive(Default)]
struct RefreshHistory {
    states: Vec<(Vec<f64>, Vec<f64>)>,
    frozen: bool,
}

impl RefreshHistory {
    fn record(
        &mut self,
        dataset: &LongitudinalDataset,
        covariance: WorkingCovariance,
        config: &SolverConfig,
    ) -> Result<WorkingCovariance> {
        let key = (
            covariance.lag_correlations().as_slice().to_vec(),
            covariance.variances().as_slice().to_vec(),
        );
        let last = self.states.len().saturating_sub(1);
        let Some(start) = self.states[..last].iter().position(|s| *s == key) else {
            self.states.push(key);
            return Ok(covariance);
        };
        self.frozen = true;
        let cycle = &self.states[start..];
        let len = cycle.len() as f64;
        let average = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> Vec<f64> {
            let width = pick(&cycle[0]).len();
            (0..width).map(|k| cycle.iter().map(|s| pick(s)[k]).sum::<f64>() / len).collect()
        };
        let sigma = ScoreVariances::new(average(|s| &s.1))?;
        if config.force_independence {
            return uncorrelated_covariance(dataset, &sigma);
        }
        stationary_covariance(dataset, &LagCorrelations::new(average(|s| &s.0))?, &sigma)
    }
}

/// Bounds every generalized eigenvalue of (next, current) to
/// [1/MAX_OMEGA_SCALE_STEP, MAX_OMEGA_SCALE_STEP], so that no direction of Ω
/// shrinks or grows by more than that factor in one iteration. Keeps β, which
/// solves the equations at the current radius, from facing a radius orders of
/// magnitude smaller than its residuals.
fn limit_scale_change(next: DMatrix<f64>, current: &DMatrix<f64>) -> DMatrix<f64> {
    let Some(chol) = current.clone().cholesky() else {
        return next;
    };
    let l = chol.l();
    let Some(l_inv) = l.clone().try_inverse() else {
        return next;
    };
    let whitened = &l_inv * &next * l_inv.transpose();
    let whitened = (&whitened + whitened.transpose()) * 0.5;
    let eig = whitened.symmetric_eigen();
    let (lo, hi) = (1.0 / MAX_OMEGA_SCALE_STEP, MAX_OMEGA_SCALE_STEP);
    if eig.eigenvalues.iter().all(|&v| (lo..=hi).contains(&v)) {
        return next;
    }
    let clamped = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.clamp(lo, hi)));
    let bounded = &eig.eigenvectors * clamped * eig.eigenvectors.transpose();
    let out = &l * bounded * l.transpose();
    (&out + out.transpose()) * 0.5
}

fn relative_change(new: &DMatrix<f64>, old: &DMatrix<f64>) -> f64 {
    let base = old.norm();
    if base > 0.0 {
        (new - old).norm() / base
    } else {
        new.norm()
    }
}

fn newton(
    dataset: &LongitudinalDataset,
    tau: QuantileLevel,
    start: DVector<f64>,
    weighting: Weighting<'_>,
    config: &SolverConfig,
) -> Result<NewtonOutcome> {
    let p = dataset.p();
    let mut beta = start;
    let mut omega = DMatrix::identity(p, p) / dataset.m() as f64;
    let identity_gamma;
    let (gamma, empirical) = match weighting {
        Weighting::Independence => {
            identity_gamma = identity_sparsity(dataset);
            (&identity_gamma, None)
        }
        Weighting::Stationary { empirical, gamma } => (gamma, Some(empirical)),
    };
    let mut history = RefreshHistory::default();
    let mut covariance = match empirical {
        None => independence_covariance(dataset, sigma_constant(tau))?,
        Some(e) => history.record(dataset, working_covariance(dataset, &beta, tau, e, config)?, config)?,
    };

    let mut converged = false;
    // In small samples the joint (β, Ω) map can cycle; relaxing the Ω update
    // while successive β steps reverse direction leaves the fixed points unchanged.
    let mut relaxation: f64 = 1.0;
    let mut previous_step: Option<DVector<f64>> = None;
    let mut iterations = 0;
    let mut state = SmoothingState::new(dataset, omega.clone())?;
    while iterations < config.max_outer_iterations {
        iterations += 1;
        if let (Some(e), true) = (empirical, config.rho_refresh && iterations > 1 && !history.frozen) {
            covariance = history.record(dataset, working_covariance(dataset, &beta, tau, e, config)?, config)?;
        }
        let eval = equations::evaluate(dataset, &beta, &state, gamma, &covariance, tau, true)?;
        let g = eval.jacobian.expect("full evaluation");
        let meat = eval.meat.expect("full evaluation");
        check_conditioning(&g)?;
        let lu = g.clone().lu();
        let step = lu
            .solve(&eval.score)
            .ok_or_else(|| Error::Singular("Jacobian is singular".into()))?;

        let base = eval.score.norm();
        let mut t = 1.0;
        let mut candidate = beta.clone();
        for _ in 0..=MAX_HALVINGS {
            let trial_beta = &beta + &step * t;
            let trial = smoothed_estimating_function(dataset, &trial_beta, &state, gamma, &covariance, tau)?;
            if trial.norm() <= base {
                candidate = trial_beta;
                break;
            }
            t *= 0.5;
        }

        let next_omega = limit_scale_change(equations::sandwich(&g, &meat)?, &omega);
        let beta_change = (&candidate - &beta).amax();
        let omega_change = relative_change(&next_omega, &omega);
        let taken = &candidate - &beta;
        beta = candidate;
        if let Some(prev) = &previous_step {
            relaxation = if taken.dot(prev) < 0.0 {
                (relaxation * 0.5).max(MIN_OMEGA_RELAXATION)
            } else {
                (relaxation * 2.0).min(1.0)
            };
        }
        previous_step = Some(taken);
        omega = if relaxation < 1.0 {
            &omega + (&next_omega - &omega) * relaxation
        } else {
            next_omega
        };
        state = SmoothingState::new(dataset, omega.clone())?;
        if !beta.iter().all(|b| b.is_finite()) {
            return Err(Error::Singular("Newton iteration diverged".into()));
        }
        if beta_change < config.beta_tolerance && omega_change < config.omega_tolerance {
            converged = true;
            break;
        }
    }

    Ok(NewtonOutcome {
        context: FitContext {
            beta,
            state,
            gamma: gamma.clone(),
            covariance,
            tau,
        },
        omega,
        iterations,
        converged,
    })
}

fn into_result(outcome: NewtonOutcome, method: Method) -> (FitResult, FitContext) {
    let rho_hat = match method {
        Method::Wi => Vec::new(),
        _ => outcome.context.covariance.lag_correlations().as_slice().to_vec(),
    };
    let std_errors = outcome.omega.diagonal().map(|v| v.max(0.0).sqrt());
    (
        FitResult {
            beta: outcome.context.beta.clone(),
            omega: outcome.omega,
            std_errors,
            iterations: outcome.iterations,
            converged: outcome.converged,
            tau: outcome.context.tau,
            method,
            rho_hat,
        },
        outcome.context,
    )
}

fn fit_wi_detailed(
    dataset: &LongitudinalDataset,
    tau: QuantileLevel,
    config: &SolverConfig,
) -> Result<(FitResult, FitContext)> {
    let mut start = least_squares_start(dataset)?;
    let x = dataset.stacked_design();
    let y = dataset.stacked_responses();
    if config.exact_wi {
        if let Some(vertex) = refine::refine_to_vertex(&x, &y, tau.value(), &start) {
            start = vertex;
        }
    }
    let mut outcome = newton(dataset, tau, start, Weighting::Independence, config)?;
    if config.exact_wi {
        if let Some(exact) = refine::refine_to_vertex(&x, &y, tau.value(), &outcome.context.beta) {
            let ctx = &outcome.context;
            let eval = equations::evaluate(dataset, &exact, &ctx.state, &ctx.gamma, &ctx.covariance, tau, true)?;
            let g = eval.jacobian.expect("full evaluation");
            check_conditioning(&g)?;
            outcome.omega = equations::sandwich(&g, &eval.meat.expect("full evaluation"))?;
            outcome.context.beta = exact;
        }
    }
    Ok(into_result(outcome, Method::Wi))
}

/// Γ for the correlated estimators under `config.gamma_mode`.
pub fn sparsity_weights(dataset: &LongitudinalDataset, tau: QuantileLevel, config: &SolverConfig) -> Result<SparsityWeights> {
    match config.gamma_mode {
        GammaMode::Identity => Ok(identity_sparsity(dataset)),
        GammaMode::Hk => {
            let h = hall_sheather_bandwidth(tau, dataset.n_obs())?;
            let lo_tau = QuantileLevel::new(tau.value() - h)?;
            let hi_tau = QuantileLevel::new(tau.value() + h)?;
            let (lo, hi) = rayon::join(
                || fit_wi_detailed(dataset, lo_tau, config),
                || fit_wi_detailed(dataset, hi_tau, config),
            );
            estimate_sparsity_hk(dataset, tau, h, &lo?.0, &hi?.0)
        }
    }
}

/// Fits one estimator and returns the state at the final iterate.
pub fn fit_detailed(
    dataset: &LongitudinalDataset,
    tau: QuantileLevel,
    method: Method,
    config: &SolverConfig,
) -> Result<(FitResult, FitContext)> {
    let mut all = fit_methods_detailed(dataset, tau, &[method], config)?;
    all.pop().expect("one method requested").1
}

type Detailed = Result<(FitResult, FitContext)>;

fn fit_methods_detailed(
    dataset: &LongitudinalDataset,
    tau: QuantileLevel,
    methods: &[Method],
    config: &SolverConfig,
) -> Result<Vec<(Method, Detailed)>> {
    config.validate()?;
    check_design(dataset)?;
    let correlated = methods.iter().any(|m| *m != Method::Wi);
    if correlated && dataset.max_occasions() < 2 {
        return Err(Error::InsufficientData(
            "correlated estimators need at least one subject with two or more occasions".into(),
        ));
    }

    let wi = fit_wi_detailed(dataset, tau, config);
    let gamma = if correlated && wi.is_ok() {
        Some(sparsity_weights(dataset, tau, config))
    } else {
        None
    };

    let mut out = Vec::with_capacity(methods.len());
    for &method in methods {
        let result = match (&wi, method) {
            (Ok(wi), Method::Wi) => Ok(wi.clone()),
            (Err(e), _) => Err(Error::Precondition(format!("working-independence fit failed: {e}"))),
            (Ok(wi), _) => match gamma.as_ref().expect("computed for correlated methods") {
                Err(e) => Err(Error::Precondition(format!("sparsity estimation failed: {e}"))),
                Ok(gamma) => {
                    let weighting = Weighting::Stationary {
                        empirical: method == Method::Aqr,
                        gamma,
                    };
                    newton(dataset, tau, wi.0.beta.clone(), weighting, config).map(|o| into_result(o, method))
                }
            },
        };
        out.push((method, result));
    }
    Ok(out)
}

/// Fits `method` at level `tau`.
///
/// Working independence starts from least squares; PQR and AQR start from
/// the working-independence estimate. Hitting the iteration cap is reported
/// through `FitResult::converged`, not as an error.
pub fn fit(dataset: &LongitudinalDataset, tau: QuantileLevel, method: Method, config: &SolverConfig) -> Result<FitResult> {
    fit_detailed(dataset, tau, method, config).map(|(r, _)| r)
}

/// Fits several estimators on one dataset, sharing the working-independence
/// start and the sparsity weights.
pub fn fit_methods(
    dataset: &LongitudinalDataset,
    tau: QuantileLevel,
    methods: &[Method],
    config: &SolverConfig,
) -> Result<Vec<(Method, Result<FitResult>)>> {
    Ok(fit_methods_detailed(dataset, tau, methods, config)?
        .into_iter()
        .map(|(m, r)| (m, r.map(|(f, _)| f)))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Subject;

    fn q(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    #[test]
    fn rank_deficient_design_rejected() {
        let rows = vec![vec![1.0, 2.0], vec![2.0, 4.0], vec![3.0, 6.0]];
        let s = Subject::from_rows("a", &rows, &[1.0, 2.0, 3.0], false).unwrap();
        let data = LongitudinalDataset::new(vec![s]).unwrap();
        assert!(matches!(
            fit(&data, q(0.5), Method::Wi, &SolverConfig::default()),
            Err(Error::RankDeficient { rank: 1, p: 2 })
        ));
    }

    #[test]
    fn too_few_observations_rejected() {
        let s = Subject::from_rows("a", &[vec![1.0]], &[1.0], true).unwrap();
        let data = LongitudinalDataset::new(vec![s]).unwrap();
        assert!(matches!(
            fit(&data, q(0.5), Method::Wi, &SolverConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn correlated_fit_needs_repeated_measures() {
        let subjects = (0..12)
            .map(|i| Subject::from_rows(i.to_string(), &[vec![]], &[i as f64], true).unwrap())
            .collect();
        let data = LongitudinalDataset::new(subjects).unwrap();
        assert!(fit(&data, q(0.5), Method::Wi, &SolverConfig::default()).is_ok());
        assert!(matches!(
            fit(&data, q(0.5), Method::Pqr, &SolverConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn invalid_config_rejected() {
        let s = Subject::from_rows("a", &[vec![], vec![]], &[1.0, 2.0], true).unwrap();
        let data = LongitudinalDataset::new(vec![s]).unwrap();
        let config = SolverConfig {
            max_outer_iterations: 0,
            ..SolverConfig::default()
        };
        assert!(matches!(fit(&data, q(0.5), Method::Wi, &config), Err(Error::Config(_))));
    }

    #[test]
    fn iteration_cap_is_flagged_not_raised() {
        let subjects = (0..20)
            .map(|i| {
                let y: Vec<f64> = (0..3).map(|j| ((i * 7 + j * 3) % 11) as f64 / 3.0).collect();
                Subject::from_rows(i.to_string(), &[vec![], vec![], vec![]], &y, true).unwrap()
            })
            .collect();
        let data = LongitudinalDataset::new(subjects).unwrap();
        let config = SolverConfig {
            max_outer_iterations: 1,
            gamma_mode: GammaMode::Identity,
            ..SolverConfig::default()
        };
        let r = fit(&data, q(0.5), Method::Pqr, &config).unwrap();
        assert!(!r.converged);
        assert_eq!(r.iterations, 1);
    }
}
