//! Seeded Monte Carlo studies of the estimators.
//!
//! Data follow y_ij = β₀ + β₁x_ij1 + β₂x_ij2 + ε_ij with x_ij1 ~ Bernoulli(0.5),
//! x_ij2 ~ N(0, 1) and within-subject AR(1) dependence in ε_i, centered so
//! that the τ-quantile of every ε_ij is zero. Every subject draws from its own
//! ChaCha stream keyed by (master seed, replication), so a study gives the
//! same numbers regardless of how replications are scheduled.

use std::fmt;
use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::{normal_cdf, normal_quantile, LongitudinalDataset, Method, QuantileLevel, Subject};
use crate::solver::{fit_methods, SolverConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ErrorCase {
    Normal,
    /// χ²₂ marginals through a Gaussian copula.
    ChiSq2,
    /// Multivariate t₃ with one χ²₃ divisor per subject.
    T3,
}

impl ErrorCase {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCase::Normal => "normal",
            ErrorCase::ChiSq2 => "chisq",
            ErrorCase::T3 => "t",
        }
    }

    /// τ-quantile of the uncentered marginal.
    pub fn marginal_quantile(self, tau: QuantileLevel) -> f64 {
        let t = tau.value();
        match self {
            ErrorCase::Normal => normal_quantile(t),
            ErrorCase::ChiSq2 => -2.0 * (-t).ln_1p(),
            ErrorCase::T3 => t3_quantile(t),
        }
    }
}

impl fmt::Display for ErrorCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ErrorCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "normal" | "nor" => Ok(ErrorCase::Normal),
            "chisq" | "chisq2" | "chi" => Ok(ErrorCase::ChiSq2),
            "t" | "t3" => Ok(ErrorCase::T3),
            other => Err(Error::Usage(format!("unknown error case `{other}` (expected normal, chisq or t)"))),
        }
    }
}

fn t3_cdf(t: f64) -> f64 {
    let s = t / 3f64.sqrt();
    0.5 + (s.atan() + s / (1.0 + s * s)) / std::f64::consts::PI
}

fn t3_pdf(t: f64) -> f64 {
    6.0 * 3f64.sqrt() / (std::f64::consts::PI * (3.0 + t * t).powi(2))
}

fn t3_quantile(p: f64) -> f64 {
    let mut x = StudentsT::new(0.0, 1.0, 3.0).expect("valid t parameters").inverse_cdf(p);
    for _ in 0..3 {
        x -= (t3_cdf(x) - p) / t3_pdf(x);
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub m: usize,
    pub n: usize,
    pub beta_true: Vec<f64>,
    pub rho: f64,
    pub error_case: ErrorCase,
    pub taus: Vec<QuantileLevel>,
    pub methods: Vec<Method>,
    pub replications: usize,
    pub master_seed: u64,
    pub solver: SolverConfig,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            m: 500,
            n: 4,
            beta_true: vec![-0.5, 0.5, 1.0],
            rho: 0.5,
            error_case: ErrorCase::Normal,
            taus: [0.25, 0.5, 0.95].map(|t| QuantileLevel::new(t).expect("valid level")).to_vec(),
            methods: vec![Method::Wi, Method::Pqr, Method::Aqr],
            replications: 1000,
            master_seed: 20_150_101,
            solver: SolverConfig::default(),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 || self.n < 2 {
            return Err(Error::Config("simulation needs m ≥ 2 and n ≥ 2".into()));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("AR(1) parameter {} outside [0, 1)", self.rho)));
        }
        if self.beta_true.len() != 3 {
            return Err(Error::Config("beta_true must have three entries".into()));
        }
        if self.taus.is_empty() || self.methods.is_empty() {
            return Err(Error::Config("need at least one quantile level and one method".into()));
        }
        self.solver.validate()
    }
}

/// AR(1) correlation matrix with entries ρ^|j−k|.
pub fn ar1_covariance(rho: f64, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |j, k| rho.powi(j.abs_diff(k) as i32))
}

fn ar1_factor(rho: f64, n: usize) -> Result<DMatrix<f64>> {
    Cholesky::<f64, Dyn>::new(ar1_covariance(rho, n))
        .map(|c| c.l())
        .ok_or_else(|| Error::Config(format!("AR(1) matrix with ρ = {rho} is not positive definite")))
}

fn raw_errors<R: Rng + ?Sized>(case: ErrorCase, factor: &DMatrix<f64>, rng: &mut R) -> DVector<f64> {
    let n = factor.nrows();
    let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let latent = factor * z;
    match case {
        ErrorCase::Normal => latent,
        // F⁻¹_{χ²₂}(Φ(w)) = −2 log(1 − Φ(w)) = −2 log Φ(−w)
        ErrorCase::ChiSq2 => latent.map(|w| -2.0 * normal_cdf(-w).ln()),
        ErrorCase::T3 => {
            let w: f64 = ChiSquared::new(3.0).expect("valid dof").sample(rng);
            latent / (w / 3.0).sqrt()
        }
    }
}

/// One subject's error vector, centered so that its marginal τ-quantile is zero.
pub fn sample_errors<R: Rng + ?Sized>(
    case: ErrorCase,
    rho: f64,
    n: usize,
    tau: QuantileLevel,
    rng: &mut R,
) -> Result<DVector<f64>> {
    let factor = ar1_factor(rho, n)?;
    let shift = case.marginal_quantile(tau);
    Ok(raw_errors(case, &factor, rng).add_scalar(-shift))
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream for one subject of one replication.
pub fn subject_rng(master_seed: u64, replication: u64, subject: u64) -> ChaCha8Rng {
    let mut state = master_seed ^ splitmix64(&mut replication.wrapping_mul(0xD1B5_4A32_D192_ED03).clone());
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(subject);
    rng
}

struct RawSubject {
    x1: Vec<f64>,
    x2: Vec<f64>,
    errors: DVector<f64>,
}

fn draw_replication(config: &SimConfig, factor: &DMatrix<f64>, replication: usize) -> Vec<RawSubject> {
    let coin = Bernoulli::new(0.5).expect("valid probability");
    (0..config.m)
        .map(|i| {
            let mut rng = subject_rng(config.master_seed, replication as u64, i as u64);
            let x1: Vec<f64> = (0..config.n).map(|_| f64::from(u8::from(coin.sample(&mut rng)))).collect();
            let x2: Vec<f64> = (0..config.n).map(|_| rng.sample(StandardNormal)).collect();
            let errors = raw_errors(config.error_case, factor, &mut rng);
            RawSubject { x1, x2, errors }
        })
        .collect()
}

/// β₀ + β₁x₁ + β₂x₂ + ε.
pub fn linear_predictor(beta: &[f64], x1: f64, x2: f64, error: f64) -> f64 {
    beta[0] + beta[1] * x1 + beta[2] * x2 + error
}

fn assemble(config: &SimConfig, raw: &[RawSubject], tau: QuantileLevel) -> Result<LongitudinalDataset> {
    let shift = config.error_case.marginal_quantile(tau);
    let subjects = raw
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rows: Vec<Vec<f64>> = (0..config.n).map(|j| vec![s.x1[j], s.x2[j]]).collect();
            let y: Vec<f64> = (0..config.n)
                .map(|j| linear_predictor(&config.beta_true, s.x1[j], s.x2[j], s.errors[j] - shift))
                .collect();
            Subject::from_rows(format!("s{i}"), &rows, &y, true)
        })
        .collect::<Result<Vec<_>>>()?;
    LongitudinalDataset::new(subjects)
}

/// The dataset of replication `replication` at level `tau`. Levels share the
/// same draws and differ only in the error centering.
pub fn generate_dataset(config: &SimConfig, tau: QuantileLevel, replication: usize) -> Result<LongitudinalDataset> {
    config.validate()?;
    let factor = ar1_factor(config.rho, config.n)?;
    assemble(config, &draw_replication(config, &factor, replication), tau)
}

/// Outcome of one fit inside a study.
#[derive(Debug, Clone, PartialEq)]
pub struct FitRecord {
    pub replication: usize,
    pub tau: QuantileLevel,
    pub method: Method,
    /// (β̂, SE) when the fit converged.
    pub estimate: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellSummary {
    pub tau: QuantileLevel,
    pub method: Method,
    pub coefficient: usize,
    pub n_ok: usize,
    pub n_fail: usize,
    pub bias: Option<f64>,
    /// Sample standard deviation; absent with fewer than two replications.
    pub sd: Option<f64>,
    pub mean_se: Option<f64>,
    /// MSE(WI) / MSE(method); absent without a WI cell.
    pub eff: Option<f64>,
    pub coverage: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStudyReport {
    pub cells: Vec<CellSummary>,
}

impl SimStudyReport {
    pub fn cell(&self, tau: f64, method: Method, coefficient: usize) -> Option<&CellSummary> {
        self.cells
            .iter()
            .find(|c| c.tau.value() == tau && c.method == method && c.coefficient == coefficient)
    }

    pub fn failures(&self) -> usize {
        // one failure is counted once per coefficient
        self.cells.iter().filter(|c| c.coefficient == 0).map(|c| c.n_fail).sum()
    }
}

/// Two-sided 95% normal critical value.
const Z_95: f64 = 1.959_963_984_540_054;

/// Aggregates fit records into per-(τ, method, coefficient) metrics.
pub fn summarize(records: &[FitRecord], beta_true: &[f64]) -> SimStudyReport {
    let mut taus: Vec<QuantileLevel> = Vec::new();
    let mut methods: Vec<Method> = Vec::new();
    for r in records {
        if !taus.contains(&r.tau) {
            taus.push(r.tau);
        }
        if !methods.contains(&r.method) {
            methods.push(r.method);
        }
    }

    struct Moments {
        n_ok: usize,
        n_fail: usize,
        bias: Option<f64>,
        sd: Option<f64>,
        mean_se: Option<f64>,
        coverage: Option<f64>,
        mse: Option<f64>,
    }

    let moments = |tau: QuantileLevel, method: Method, k: usize| -> Moments {
        let cell: Vec<&FitRecord> = records.iter().filter(|r| r.tau == tau && r.method == method).collect();
        let ok: Vec<(f64, f64)> = cell
            .iter()
            .filter_map(|r| r.estimate.as_ref().map(|(b, s)| (b[k], s[k])))
            .collect();
        let n_ok = ok.len();
        let n_fail = cell.len() - n_ok;
        if n_ok == 0 {
            return Moments {
                n_ok,
                n_fail,
                bias: None,
                sd: None,
                mean_se: None,
                coverage: None,
                mse: None,
            };
        }
        let r = n_ok as f64;
        let mean = ok.iter().map(|e| e.0).sum::<f64>() / r;
        let bias = mean - beta_true[k];
        let sd = (n_ok > 1).then(|| (ok.iter().map(|e| (e.0 - mean).powi(2)).sum::<f64>() / (r - 1.0)).sqrt());
        let mean_se = ok.iter().map(|e| e.1).sum::<f64>() / r;
        let hits = ok.iter().filter(|e| (e.0 - beta_true[k]).abs() <= Z_95 * e.1).count();
        let mse = bias * bias + sd.map_or(0.0, |s| s * s * (r - 1.0) / r);
        Moments {
            n_ok,
            n_fail,
            bias: Some(bias),
            sd,
            mean_se: Some(mean_se),
            coverage: Some(hits as f64 / r),
            mse: Some(mse),
        }
    };

    let p = beta_true.len();
    let mut cells = Vec::new();
    for &tau in &taus {
        for &method in &methods {
            for k in 0..p {
                let mo = moments(tau, method, k);
                let eff = if method == Method::Wi {
                    mo.mse.map(|_| 1.0)
                } else if methods.contains(&Method::Wi) {
                    let wi = moments(tau, Method::Wi, k);
                    match (wi.mse, mo.mse) {
                        (Some(a), Some(b)) if b > 0.0 => Some(a / b),
                        _ => None,
                    }
                } else {
                    None
                };
                cells.push(CellSummary {
                    tau,
                    method,
                    coefficient: k,
                    n_ok: mo.n_ok,
                    n_fail: mo.n_fail,
                    bias: mo.bias,
                    sd: mo.sd,
                    mean_se: mo.mean_se,
                    eff,
                    coverage: mo.coverage,
                });
            }
        }
    }
    SimStudyReport { cells }
}

/// Fits every (τ, method) on every replication and records the fits.
pub fn run_replications(config: &SimConfig) -> Result<Vec<FitRecord>> {
    config.validate()?;
    let factor = ar1_factor(config.rho, config.n)?;
    let per_rep: Vec<Vec<FitRecord>> = (0..config.replications)
        .into_par_iter()
        .map(|rep| {
            let raw = draw_replication(config, &factor, rep);
            let mut out = Vec::with_capacity(config.taus.len() * config.methods.len());
            for &tau in &config.taus {
                let fits = assemble(config, &raw, tau)
                    .and_then(|data| fit_methods(&data, tau, &config.methods, &config.solver));
                match fits {
                    Ok(fits) => out.extend(fits.into_iter().map(|(method, r)| FitRecord {
                        replication: rep,
                        tau,
                        method,
                        estimate: r
                            .ok()
                            .filter(|f| f.converged)
                            .map(|f| (f.beta.as_slice().to_vec(), f.std_errors.as_slice().to_vec())),
                    })),
                    Err(_) => out.extend(config.methods.iter().map(|&method| FitRecord {
                        replication: rep,
                        tau,
                        method,
                        estimate: None,
                    })),
                }
            }
            out
        })
        .collect();
    Ok(per_rep.into_iter().flatten().collect())
}

pub fn run_study(config: &SimConfig) -> Result<SimStudyReport> {
    let records = run_replications(config)?;
    Ok(summarize(&records, &config.beta_true))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn q(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    #[test]
    fn ar1_examples() {
        assert_eq!(ar1_covariance(0.0, 4), DMatrix::identity(4, 4));
        let c = ar1_covariance(0.5, 3);
        assert_eq!(c, DMatrix::from_row_slice(3, 3, &[1.0, 0.5, 0.25, 0.5, 1.0, 0.5, 0.25, 0.5, 1.0]));
        for rho in [0.0, 0.3, 0.9, 0.999] {
            assert!(ar1_factor(rho, 6).is_ok());
        }
    }

    #[test]
    fn marginal_quantiles() {
        assert_relative_eq!(ErrorCase::Normal.marginal_quantile(q(0.5)), 0.0, epsilon = 1e-15);
        assert_relative_eq!(ErrorCase::ChiSq2.marginal_quantile(q(0.5)), 2.0 * 2f64.ln(), epsilon = 1e-14);
        assert_relative_eq!(ErrorCase::T3.marginal_quantile(q(0.5)), 0.0, epsilon = 1e-12);
        // scipy.stats.t(3).ppf(0.95)
        assert_relative_eq!(ErrorCase::T3.marginal_quantile(q(0.95)), 2.353_363_434_801_823_6, epsilon = 1e-10);
        assert_relative_eq!(t3_cdf(t3_quantile(0.25)), 0.25, epsilon = 1e-14);
    }

    #[test]
    fn centered_errors_have_zero_quantile() {
        for case in [ErrorCase::Normal, ErrorCase::ChiSq2, ErrorCase::T3] {
            for tau in [0.25, 0.5, 0.95] {
                let t = q(tau);
                let mut rng = ChaCha8Rng::seed_from_u64(7);
                let factor = ar1_factor(0.5, 2).unwrap();
                let shift = case.marginal_quantile(t);
                let mut draws: Vec<f64> = (0..500_000)
                    .map(|_| raw_errors(case, &factor, &mut rng))
                    .flat_map(|e| [e[0] - shift, e[1] - shift])
                    .collect();
                draws.sort_by(f64::total_cmp);
                let empirical = draws[(tau * draws.len() as f64) as usize];
                assert!(empirical.abs() <= 0.01, "{case} τ={tau}: {empirical}");
            }
        }
    }

    fn lag1_correlation(rho: f64, draws: usize) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for _ in 0..draws {
            let e = sample_errors(ErrorCase::Normal, rho, 2, q(0.5), &mut rng).unwrap();
            sa += e[0];
            sb += e[1];
            saa += e[0] * e[0];
            sbb += e[1] * e[1];
            sab += e[0] * e[1];
        }
        let n = draws as f64;
        let cov = sab / n - sa * sb / (n * n);
        cov / ((saa / n - (sa / n).powi(2)) * (sbb / n - (sb / n).powi(2))).sqrt()
    }

    #[test]
    fn normal_errors_follow_ar1() {
        assert!(lag1_correlation(0.0, 100_000).abs() < 0.02);
        assert!((lag1_correlation(0.9, 100_000) - 0.9).abs() < 0.02);
    }

    #[test]
    fn linear_predictor_example() {
        assert_eq!(linear_predictor(&[-0.5, 0.5, 1.0], 1.0, 2.0, 0.0), 2.0);
    }

    fn small_config() -> SimConfig {
        SimConfig {
            m: 30,
            n: 3,
            rho: 0.5,
            taus: vec![q(0.5)],
            replications: 3,
            master_seed: 42,
            ..SimConfig::default()
        }
    }

    #[test]
    fn datasets_are_deterministic_and_distinct() {
        let c = small_config();
        let a = generate_dataset(&c, q(0.5), 0).unwrap();
        let b = generate_dataset(&c, q(0.5), 0).unwrap();
        assert_eq!(a, b);
        let next = generate_dataset(&c, q(0.5), 1).unwrap();
        assert_ne!(a.stacked_responses(), next.stacked_responses());
        let other = generate_dataset(&c, q(0.25), 0).unwrap();
        assert_eq!(a.stacked_design(), other.stacked_design());
        assert_eq!(a.m(), 30);
        assert_eq!(a.p(), 3);
    }

    #[test]
    fn bernoulli_covariate_frequency() {
        let c = SimConfig {
            m: 25_000,
            n: 4,
            ..small_config()
        };
        let data = generate_dataset(&c, q(0.5), 0).unwrap();
        let x = data.stacked_design();
        let mean = x.column(1).mean();
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
        assert!(x.column(1).iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { m: 1, ..small_config() }.validate().is_err());
        assert!(SimConfig { rho: 1.0, ..small_config() }.validate().is_err());
        assert!(SimConfig { replications: 0, ..small_config() }.validate().is_err());
        assert!(SimConfig::default().validate().is_ok());
    }

    fn record(rep: usize, method: Method, beta: Vec<f64>, se: Vec<f64>) -> FitRecord {
        FitRecord {
            replication: rep,
            tau: q(0.5),
            method,
            estimate: Some((beta, se)),
        }
    }

    #[test]
    fn summarize_exact_estimates() {
        let records: Vec<FitRecord> = (0..4).map(|r| record(r, Method::Wi, vec![0.5], vec![1.0])).collect();
        let report = summarize(&records, &[0.5]);
        let c = report.cell(0.5, Method::Wi, 0).unwrap();
        assert_eq!(c.bias, Some(0.0));
        assert_eq!(c.sd, Some(0.0));
        assert_eq!(c.coverage, Some(1.0));
        assert_eq!(c.eff, Some(1.0));
    }

    #[test]
    fn summarize_two_point_sd_and_eff() {
        let records = vec![
            record(0, Method::Wi, vec![0.4], vec![0.1]),
            record(1, Method::Wi, vec![0.6], vec![0.1]),
            record(0, Method::Pqr, vec![0.45], vec![0.1]),
            record(1, Method::Pqr, vec![0.55], vec![0.1]),
            FitRecord {
                replication: 2,
                tau: q(0.5),
                method: Method::Pqr,
                estimate: None,
            },
        ];
        let report = summarize(&records, &[0.5]);
        let wi = report.cell(0.5, Method::Wi, 0).unwrap();
        assert!(wi.bias.unwrap().abs() < 1e-15);
        assert_relative_eq!(wi.sd.unwrap(), 0.02f64.sqrt(), epsilon = 1e-15);
        let pqr = report.cell(0.5, Method::Pqr, 0).unwrap();
        assert_eq!(pqr.n_fail, 1);
        assert_eq!(pqr.n_ok, 2);
        // MSE ratio 0.01 / 0.0025
        assert_relative_eq!(pqr.eff.unwrap(), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn single_replication_has_no_sd() {
        let report = summarize(&[record(0, Method::Wi, vec![0.7], vec![0.1])], &[0.5]);
        let c = report.cell(0.5, Method::Wi, 0).unwrap();
        assert_eq!(c.sd, None);
        assert_relative_eq!(c.bias.unwrap(), 0.2, epsilon = 1e-15);
        assert_eq!(c.eff, Some(1.0));
    }

    #[test]
    fn wi_only_study_has_unit_efficiency() {
        let c = SimConfig {
            methods: vec![Method::Wi],
            ..small_config()
        };
        let report = run_study(&c).unwrap();
        assert!(report.cells.iter().all(|c| c.eff == Some(1.0)));
    }

    #[test]
    fn studies_are_deterministic_across_thread_counts() {
        let c = small_config();
        let a = run_study(&c).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_study(&c)).unwrap();
        assert_eq!(a, b);
    }
}
