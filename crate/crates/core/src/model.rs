//! Longitudinal data containers and the scalar check/score functions.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Quantile level τ, strictly inside (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct QuantileLevel(f64);

impl QuantileLevel {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 && tau < 1.0 {
            Ok(Self(tau))
        } else {
            Err(Error::InvalidInput(format!("quantile level {tau} outside (0, 1)")))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl fmt::Display for QuantileLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Estimator variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// Working independence.
    Wi,
    /// Stationary working correlation with constant score variance τ(1−τ).
    Pqr,
    /// Stationary working correlation with empirical per-occasion score variances.
    Aqr,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Wi => "WI",
            Method::Pqr => "PQR",
            Method::Aqr => "AQR",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "wi" => Ok(Method::Wi),
            "pqr" => Ok(Method::Pqr),
            "aqr" => Ok(Method::Aqr),
            other => Err(Error::Usage(format!("unknown method `{other}` (expected wi, pqr or aqr)"))),
        }
    }
}

/// One subject's repeated measures: row `j` of `covariates` pairs with `responses[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Subject {
    pub id: String,
    covariates: DMatrix<f64>,
    responses: DVector<f64>,
}

impl Subject {
    pub fn new(id: impl Into<String>, covariates: DMatrix<f64>, responses: DVector<f64>) -> Result<Self> {
        let id = id.into();
        if responses.is_empty() {
            return Err(Error::InvalidInput(format!("subject `{id}` has no observations")));
        }
        if covariates.nrows() != responses.len() {
            return Err(Error::InvalidInput(format!(
                "subject `{id}`: {} covariate rows but {} responses",
                covariates.nrows(),
                responses.len()
            )));
        }
        if covariates.iter().chain(responses.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("subject `{id}` has non-finite entries")));
        }
        Ok(Self {
            id,
            covariates,
            responses,
        })
    }

    /// Builds a subject from row slices, optionally prepending a constant-1 column.
    pub fn from_rows(id: impl Into<String>, rows: &[Vec<f64>], responses: &[f64], intercept: bool) -> Result<Self> {
        let id = id.into();
        let p = rows.first().map_or(0, Vec::len) + usize::from(intercept);
        if rows.iter().any(|r| r.len() + usize::from(intercept) != p) {
            return Err(Error::InvalidInput(format!("subject `{id}` has ragged covariate rows")));
        }
        let x = DMatrix::from_fn(rows.len(), p, |j, k| {
            if intercept {
                if k == 0 {
                    1.0
                } else {
                    rows[j][k - 1]
                }
            } else {
                rows[j][k]
            }
        });
        Self::new(id, x, DVector::from_column_slice(responses))
    }

    #[inline]
    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    #[inline]
    pub fn responses(&self) -> &DVector<f64> {
        &self.responses
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.responses.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    /// Residuals y_ij − x_ij'β.
    pub fn residuals(&self, beta: &DVector<f64>) -> DVector<f64> {
        &self.responses - &self.covariates * beta
    }
}

/// Ordered collection of independent subjects sharing a covariate dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalDataset {
    subjects: Vec<Subject>,
    p: usize,
}

impl LongitudinalDataset {
    pub fn new(subjects: Vec<Subject>) -> Result<Self> {
        let p = subjects
            .first()
            .map(|s| s.covariates.ncols())
            .ok_or_else(|| Error::InvalidInput("dataset has no subjects".into()))?;
        if p == 0 {
            return Err(Error::InvalidInput("covariate dimension is zero".into()));
        }
        if let Some(s) = subjects.iter().find(|s| s.covariates.ncols() != p) {
            return Err(Error::InvalidInput(format!(
                "subject `{}` has {} covariates, expected {p}",
                s.id,
                s.covariates.ncols()
            )));
        }
        Ok(Self { subjects, p })
    }

    #[inline]
    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    /// Covariate dimension.
    #[inline]
    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of subjects.
    #[inline]
    pub fn m(&self) -> usize {
        self.subjects.len()
    }

    /// Total number of observations.
    pub fn n_obs(&self) -> usize {
        self.subjects.iter().map(Subject::len).sum()
    }

    pub fn max_occasions(&self) -> usize {
        self.subjects.iter().map(Subject::len).max().unwrap_or(0)
    }

    /// All covariate rows stacked subject by subject (N × p).
    pub fn stacked_design(&self) -> DMatrix<f64> {
        let mut x = DMatrix::zeros(self.n_obs(), self.p);
        let mut row = 0;
        for s in &self.subjects {
            x.rows_mut(row, s.len()).copy_from(&s.covariates);
            row += s.len();
        }
        x
    }

    pub fn stacked_responses(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_obs(), self.subjects.iter().flat_map(|s| s.responses.iter().copied()))
    }

    /// Copy of the dataset with `responses` replaced (stacked order).
    pub fn with_responses(&self, responses: &DVector<f64>) -> Result<Self> {
        if responses.len() != self.n_obs() {
            return Err(Error::InvalidInput("response count mismatch".into()));
        }
        let mut offset = 0;
        let subjects = self
            .subjects
            .iter()
            .map(|s| {
                let y = responses.rows(offset, s.len()).into_owned();
                offset += s.len();
                Subject::new(s.id.clone(), s.covariates.clone(), y)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(subjects)
    }
}

/// Result of one estimator run.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub beta: DVector<f64>,
    /// Estimated covariance of `beta` (the converged smoothing matrix Ω).
    pub omega: DMatrix<f64>,
    pub std_errors: DVector<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub tau: QuantileLevel,
    pub method: Method,
    /// Estimated lag correlations; empty for working independence.
    pub rho_hat: Vec<f64>,
}

fn ensure_finite(u: f64) -> Result<()> {
    if u.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("non-finite argument {u}")))
    }
}

fn ensure_radius(r: f64) -> Result<()> {
    if r.is_finite() && r > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("smoothing radius must be positive, got {r}")))
    }
}

/// Standard normal CDF.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Standard normal density.
#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    FRAC_1_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal quantile, polished with one Newton step against [`normal_cdf`].
pub fn normal_quantile(p: f64) -> f64 {
    let x = Normal::standard().inverse_cdf(p);
    if !x.is_finite() {
        return x;
    }
    let d = normal_pdf(x);
    if d > 0.0 {
        x - (normal_cdf(x) - p) / d
    } else {
        x
    }
}

/// Check loss ρ_τ(u) = u(τ − I(u ≤ 0)).
pub fn check_loss(u: f64, tau: QuantileLevel) -> Result<f64> {
    ensure_finite(u)?;
    Ok(check_loss_unchecked(u, tau.0))
}

#[inline]
pub(crate) fn check_loss_unchecked(u: f64, tau: f64) -> f64 {
    if u <= 0.0 {
        u * (tau - 1.0)
    } else {
        u * tau
    }
}

/// Score ψ_τ(u) = τ − I(u < 0). Returns τ at u = 0.
pub fn score_psi(u: f64, tau: QuantileLevel) -> Result<f64> {
    ensure_finite(u)?;
    Ok(psi_unchecked(u, tau.0))
}

#[inline]
pub(crate) fn psi_unchecked(u: f64, tau: f64) -> f64 {
    if u < 0.0 {
        tau - 1.0
    } else {
        tau
    }
}

/// Smoothed score τ − 1 + Φ(u / r).
pub fn smoothed_score(u: f64, r: f64, tau: QuantileLevel) -> Result<f64> {
    ensure_radius(r)?;
    Ok(tau.0 - normal_cdf(-u / r))
}

/// φ(u / r) / r, the derivative of [`smoothed_score`] in `u`.
pub fn smoothed_score_density(u: f64, r: f64) -> Result<f64> {
    ensure_radius(r)?;
    Ok(normal_pdf(u / r) / r)
}
