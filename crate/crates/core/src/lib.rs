//! Weighted quantile regression for longitudinal data.
//!
//! Coefficients at a quantile level τ are estimated from induced-smoothed
//! estimating equations that weight each subject's score vector by a
//! stationary working correlation, solved by Newton–Raphson with a sandwich
//! covariance update. Three estimators are available:
//!
//! * [`Method::Wi`]: working independence (ordinary quantile regression).
//! * [`Method::Pqr`]: stationary lag correlations with score variance τ(1−τ).
//! * [`Method::Aqr`]: as PQR, with per-occasion empirical score variances.
//!
//! [`simulation`] reproduces the Monte Carlo design used to compare them and
//! [`io`] holds the CSV ingestion and report formats behind the `qrlong` CLI.

pub mod correlation;
pub mod error;
pub mod io;
pub mod model;
#[cfg(feature = "oracle")]
pub mod oracle;
pub mod simulation;
pub mod solver;
pub mod sparsity;

pub use error::{Error, Result};
pub use model::{
    check_loss, score_psi, smoothed_score, smoothed_score_density, FitResult, LongitudinalDataset, Method,
    QuantileLevel, Subject,
};
pub use solver::{confidence_intervals, fit, fit_methods, SolverConfig};
pub use sparsity::GammaMode;
