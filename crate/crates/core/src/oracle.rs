//! Brute-force references for the test suites.
//!
//! Nothing here is used by the estimators; the module is compiled only with
//! the `oracle` feature.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{check_loss_unchecked, LongitudinalDataset, QuantileLevel};

pub const MAX_OBSERVATIONS: usize = 40;
pub const MAX_COEFFICIENTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleFit {
    pub beta: DVector<f64>,
    /// Check-loss objective at `beta`.
    pub objective: f64,
}

/// Σ_ij ρ_τ(y_ij − x_ij'β).
pub fn check_objective(dataset: &LongitudinalDataset, beta: &DVector<f64>, tau: QuantileLevel) -> f64 {
    dataset
        .subjects()
        .iter()
        .flat_map(|s| s.residuals(beta).iter().copied().collect::<Vec<_>>())
        .map(|e| check_loss_unchecked(e, tau.value()))
        .sum()
}

fn next_combination(idx: &mut [usize], n: usize) -> bool {
    let k = idx.len();
    let mut i = k;
    while i > 0 {
        i -= 1;
        if idx[i] < n - k + i {
            idx[i] += 1;
            for j in i + 1..k {
                idx[j] = idx[j - 1] + 1;
            }
            return true;
        }
    }
    false
}

fn lexicographic_lt(a: &DVector<f64>, b: &DVector<f64>) -> bool {
    for (x, y) in a.iter().zip(b.iter()) {
        if x < y {
            return true;
        }
        if x > y {
            return false;
        }
    }
    false
}

/// Exact working-independence quantile regression by enumerating every
/// interpolating p-subset of observations.
pub fn exact_wi_fit(dataset: &LongitudinalDataset, tau: QuantileLevel) -> Result<OracleFit> {
    let n = dataset.n_obs();
    let p = dataset.p();
    if n > MAX_OBSERVATIONS || p > MAX_COEFFICIENTS {
        return Err(Error::Size(format!(
            "N = {n}, p = {p} (limits {MAX_OBSERVATIONS}, {MAX_COEFFICIENTS})"
        )));
    }
    if n < p {
        return Err(Error::RankDeficient { rank: n, p });
    }
    let x = dataset.stacked_design();
    let y = dataset.stacked_responses();

    let mut best: Option<OracleFit> = None;
    let mut idx: Vec<usize> = (0..p).collect();
    loop {
        let xb = DMatrix::from_fn(p, p, |r, c| x[(idx[r], c)]);
        let yb = DVector::from_fn(p, |r, _| y[idx[r]]);
        if xb.determinant().abs() > 1e-12 {
            if let Some(beta) = xb.lu().solve(&yb) {
                let objective = check_objective(dataset, &beta, tau);
                let replace = match &best {
                    None => true,
                    Some(b) => {
                        let tol = 1e-12 * (1.0 + b.objective.abs());
                        objective < b.objective - tol
                            || (objective <= b.objective + tol && lexicographic_lt(&beta, &b.beta))
                    }
                };
                if replace {
                    best = Some(OracleFit { beta, objective });
                }
            }
        }
        if !next_combination(&mut idx, n) {
            break;
        }
    }
    best.ok_or(Error::RankDeficient { rank: 0, p })
}

/// Central-difference Jacobian of `f` at `beta`: column k is (f(β + h e_k) − f(β − h e_k)) / 2h.
pub fn finite_difference_jacobian<F>(f: F, beta: &DVector<f64>, step: f64) -> DMatrix<f64>
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
{
    let p = beta.len();
    let mut columns = Vec::with_capacity(p);
    for k in 0..p {
        let mut up = beta.clone();
        let mut down = beta.clone();
        up[k] += step;
        down[k] -= step;
        columns.push((f(&up) - f(&down)) / (2.0 * step));
    }
    DMatrix::from_columns(&columns)
}

/// Correlation of I(ε₁ < 0) and I(ε₂ < 0) for a standard bivariate normal with correlation `rho`.
pub fn indicator_correlation_oracle(rho: f64) -> f64 {
    std::f64::consts::FRAC_2_PI * rho.asin()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Subject;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn q(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    fn intercept_only(y: &[f64]) -> LongitudinalDataset {
        LongitudinalDataset::new(
            y.iter()
                .enumerate()
                .map(|(i, &v)| Subject::from_rows(i.to_string(), &[vec![]], &[v], true).unwrap())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn odd_median() {
        let fit = exact_wi_fit(&intercept_only(&[1.0, 2.0, 3.0, 4.0, 5.0]), q(0.5)).unwrap();
        assert_eq!(fit.beta[0], 3.0);
        assert_eq!(fit.objective, 3.0);
    }

    #[test]
    fn lower_quartile_by_enumeration() {
        let data = intercept_only(&[1.0, 2.0, 3.0, 4.0]);
        let fit = exact_wi_fit(&data, q(0.25)).unwrap();
        let objectives: Vec<f64> = (1..=4)
            .map(|c| check_objective(&data, &DVector::from_vec(vec![c as f64]), q(0.25)))
            .collect();
        // 0.25(1 + 2) + 0.75 * 1
        assert_eq!(objectives[1], 1.5);
        let min = objectives.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(min, 1.5);
        assert_eq!(fit.objective, 1.5);
        // candidates 1 and 2 tie at 1.5; the smaller wins
        assert_eq!(objectives[0], 1.5);
        assert_eq!(fit.beta[0], 1.0);
    }

    #[test]
    fn objective_matches_recomputation_and_is_locally_optimal() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let subjects = (0..13)
                .map(|i| {
                    let x: f64 = rng.sample(StandardNormal);
                    let e: f64 = rng.sample(StandardNormal);
                    Subject::from_rows(i.to_string(), &[vec![x]], &[0.3 + 0.8 * x + e], true).unwrap()
                })
                .collect();
            let data = LongitudinalDataset::new(subjects).unwrap();
            let tau = q(0.3);
            let fit = exact_wi_fit(&data, tau).unwrap();
            assert!((fit.objective - check_objective(&data, &fit.beta, tau)).abs() <= 1e-12);
            for _ in 0..1000 {
                let mut d = DVector::from_fn(2, |_, _| rng.random::<f64>() - 0.5);
                d *= rng.random::<f64>() * 0.1 / d.norm();
                assert!(check_objective(&data, &(&fit.beta + d), tau) >= fit.objective - 1e-12);
            }
        }
    }

    #[test]
    fn size_guard() {
        let data = intercept_only(&vec![0.0; 41]);
        assert!(matches!(exact_wi_fit(&data, q(0.5)), Err(Error::Size(_))));
    }

    #[test]
    fn fd_recovers_linear_map() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, -2.0, 0.5, 3.0]);
        let jac = finite_difference_jacobian(|b| &a * b, &DVector::from_vec(vec![0.3, -0.1]), 1e-4);
        assert!((jac - &a).amax() < 1e-9);

        // quadratic term has zero derivative at the origin
        let quad = finite_difference_jacobian(|b| b.map(|v| v * v), &DVector::zeros(2), 1e-3);
        assert!(quad.amax() < 1e-12);
    }

    #[test]
    fn indicator_correlation_values() {
        assert_eq!(indicator_correlation_oracle(0.0), 0.0);
        assert!((indicator_correlation_oracle(1.0 - 1e-12) - 1.0).abs() < 1e-5);
        assert!((indicator_correlation_oracle(0.9) - 0.712_867_4).abs() < 1e-6);
    }

    #[test]
    fn indicator_correlation_against_monte_carlo() {
        // orthant frequency of a bivariate normal with correlation 0.9
        let rho: f64 = 0.9;
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 1_000_000;
        let mut both = 0u64;
        let mut first = 0u64;
        let mut second = 0u64;
        for _ in 0..draws {
            let z1: f64 = rng.sample(StandardNormal);
            let z2: f64 = rng.sample(StandardNormal);
            let e2 = rho * z1 + (1.0 - rho * rho).sqrt() * z2;
            let a = z1 < 0.0;
            let b = e2 < 0.0;
            first += a as u64;
            second += b as u64;
            both += (a && b) as u64;
        }
        let n = draws as f64;
        let (pa, pb, pab) = (first as f64 / n, second as f64 / n, both as f64 / n);
        let corr = (pab - pa * pb) / (pa * (1.0 - pa) * pb * (1.0 - pb)).sqrt();
        assert!((corr - indicator_correlation_oracle(rho)).abs() < 3e-3, "{corr}");
    }
}
