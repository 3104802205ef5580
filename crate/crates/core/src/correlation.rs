//! Working covariance of the score vector: Σ_i = A_i^{1/2} C(ρ) A_i^{1/2}.
//!
//! Score variances and lag correlations are indexed by within-subject
//! position, so every subject with the same number of occasions shares one
//! Σ block. Blocks are stored with their Cholesky factors and all products
//! with Σ_i⁻¹ go through triangular solves.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{psi_unchecked, LongitudinalDataset, QuantileLevel};

/// Lower bound applied to every score variance.
pub const SIGMA_MIN: f64 = 1e-4;
/// Lag correlations are clamped to ±this value.
pub const LAG_CLAMP: f64 = 0.99;
/// Minimum eigenvalue targeted by [`regularize_correlation`].
pub const MIN_EIGENVALUE: f64 = 1e-6;

/// Diagonal of A_i, one value per within-subject position.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreVariances {
    by_occasion: Vec<f64>,
}

impl ScoreVariances {
    pub fn new(by_occasion: Vec<f64>) -> Result<Self> {
        if by_occasion.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite score variance".into()));
        }
        Ok(Self {
            by_occasion: by_occasion.into_iter().map(|v| v.max(SIGMA_MIN)).collect(),
        })
    }

    pub fn constant(value: f64, occasions: usize) -> Result<Self> {
        Self::new(vec![value; occasions])
    }

    /// σ at within-subject position `j`.
    #[inline]
    pub fn get(&self, j: usize) -> f64 {
        self.by_occasion[j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.by_occasion
    }

    pub fn len(&self) -> usize {
        self.by_occasion.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_occasion.is_empty()
    }
}

/// Stationary lag correlations (ρ_1, …, ρ_L).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LagCorrelations {
    rho: Vec<f64>,
}

impl LagCorrelations {
    /// Clamps each lag into [−0.99, 0.99].
    pub fn new(rho: Vec<f64>) -> Result<Self> {
        if rho.iter().any(|r| !r.is_finite()) {
            return Err(Error::InvalidInput("non-finite lag correlation".into()));
        }
        Ok(Self {
            rho: rho.into_iter().map(|r| r.clamp(-LAG_CLAMP, LAG_CLAMP)).collect(),
        })
    }

    pub fn zeros(lags: usize) -> Self {
        Self { rho: vec![0.0; lags] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rho
    }

    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

/// τ(1−τ), the score variance at the true coefficients.
pub fn sigma_constant(tau: QuantileLevel) -> f64 {
    tau.value() * (1.0 - tau.value())
}

/// Per-occasion empirical score variances p̂_j(1 − p̂_j) with p̂_j the share of
/// subjects observed at position `j` whose response falls below x'β.
pub fn sigma_empirical(dataset: &LongitudinalDataset, beta: &DVector<f64>, _tau: QuantileLevel) -> Result<ScoreVariances> {
    let occasions = dataset.max_occasions();
    let mut below = vec![0usize; occasions];
    let mut seen = vec![0usize; occasions];
    for s in dataset.subjects() {
        let resid = s.residuals(beta);
        for (j, e) in resid.iter().enumerate() {
            seen[j] += 1;
            if *e < 0.0 {
                below[j] += 1;
            }
        }
    }
    let values = below
        .iter()
        .zip(&seen)
        .enumerate()
        .map(|(j, (&b, &n))| {
            if n == 0 {
                return Err(Error::Config(format!("no observations at occasion {j}")));
            }
            let p = b as f64 / n as f64;
            Ok(p * (1.0 - p))
        })
        .collect::<Result<Vec<_>>>()?;
    ScoreVariances::new(values)
}

/// ỹ_ij = ψ_τ(y_ij − x_ij'β) / √σ_ij, grouped by subject.
pub fn standardized_scores(
    dataset: &LongitudinalDataset,
    beta: &DVector<f64>,
    tau: QuantileLevel,
    variances: &ScoreVariances,
) -> Result<Vec<DVector<f64>>> {
    if variances.len() < dataset.max_occasions() {
        return Err(Error::InvalidInput(format!(
            "{} score variances for {} occasions",
            variances.len(),
            dataset.max_occasions()
        )));
    }
    Ok(dataset
        .subjects()
        .iter()
        .map(|s| {
            let resid = s.residuals(beta);
            DVector::from_iterator(
                s.len(),
                resid
                    .iter()
                    .enumerate()
                    .map(|(j, &e)| psi_unchecked(e, tau.value()) / variances.get(j).sqrt()),
            )
        })
        .collect())
}

/// Pooled moment estimator of the stationary lag correlations of the
/// standardized scores, for lags 1..max(n_i)−1.
pub fn estimate_lag_correlations(scores: &[DVector<f64>]) -> Result<LagCorrelations> {
    let max_n = scores.iter().map(|s| s.len()).max().unwrap_or(0);
    if max_n < 2 {
        return Err(Error::InsufficientData(
            "lag correlations need at least one subject with two or more occasions".into(),
        ));
    }
    let total: usize = scores.iter().map(|s| s.len()).sum();
    let sum_sq: f64 = scores.iter().map(|s| s.norm_squared()).sum();
    if sum_sq == 0.0 {
        return Err(Error::Degenerate("all standardized scores are zero".into()));
    }
    let scale = sum_sq / total as f64;

    let rho = (1..max_n)
        .map(|lag| {
            let mut cross = 0.0;
            let mut pairs = 0usize;
            for s in scores.iter().filter(|s| s.len() > lag) {
                cross += (0..s.len() - lag).map(|j| s[j] * s[j + lag]).sum::<f64>();
                pairs += s.len() - lag;
            }
            (cross / pairs as f64) / scale
        })
        .collect();
    LagCorrelations::new(rho)
}

/// Toeplitz correlation matrix with unit diagonal and ρ_ℓ on the ℓth off-diagonals.
pub fn build_stationary_correlation(rho: &LagCorrelations, n: usize) -> Result<DMatrix<f64>> {
    if n == 0 {
        return Err(Error::Config("correlation matrix needs at least one occasion".into()));
    }
    if rho.len() + 1 < n {
        return Err(Error::Config(format!("{} lags cannot fill a {n}×{n} correlation matrix", rho.len())));
    }
    Ok(DMatrix::from_fn(n, n, |j, k| {
        let lag = j.abs_diff(k);
        if lag == 0 {
            1.0
        } else {
            rho.rho[lag - 1]
        }
    }))
}

/// A positive definite correlation matrix and the identity shrinkage that produced it.
#[derive(Debug, Clone)]
pub struct RegularizedCorrelation {
    pub matrix: DMatrix<f64>,
    pub shrinkage: f64,
}

/// Returns `c` unchanged when its Cholesky factorization succeeds; otherwise
/// shrinks toward the identity, (1−λ)C + λI, with the smallest λ on the grid
/// 0.05, 0.10, …, 0.95 whose minimum eigenvalue reaches 1e-6.
pub fn regularize_correlation(c: &DMatrix<f64>) -> RegularizedCorrelation {
    if Cholesky::new(c.clone()).is_some() {
        return RegularizedCorrelation {
            matrix: c.clone(),
            shrinkage: 0.0,
        };
    }
    let n = c.nrows();
    let min_eig = SymmetricEigen::new(c.clone()).eigenvalues.min();
    for step in 1..=19 {
        let lambda = step as f64 * 0.05;
        // eigenvalues of the shrunk matrix are (1−λ)e + λ
        if (1.0 - lambda) * min_eig + lambda >= MIN_EIGENVALUE {
            let shrunk = c * (1.0 - lambda) + DMatrix::identity(n, n) * lambda;
            if Cholesky::new(shrunk.clone()).is_some() {
                return RegularizedCorrelation {
                    matrix: shrunk,
                    shrinkage: lambda,
                };
            }
        }
    }
    RegularizedCorrelation {
        matrix: DMatrix::identity(n, n),
        shrinkage: 1.0,
    }
}

#[derive(Debug, Clone)]
struct CovarianceBlock {
    sigma: DMatrix<f64>,
    factor: Cholesky<f64, Dyn>,
}

/// Σ blocks for every occasion count present in a dataset.
#[derive(Debug, Clone)]
pub struct WorkingCovariance {
    blocks: Vec<Option<CovarianceBlock>>,
    rho: LagCorrelations,
    variances: ScoreVariances,
}

impl WorkingCovariance {
    /// Σ_i for a subject with `n` occasions.
    pub fn matrix(&self, n: usize) -> Option<&DMatrix<f64>> {
        self.block(n).ok().map(|b| &b.sigma)
    }

    pub fn cholesky(&self, n: usize) -> Option<&Cholesky<f64, Dyn>> {
        self.block(n).ok().map(|b| &b.factor)
    }

    fn block(&self, n: usize) -> Result<&CovarianceBlock> {
        self.blocks
            .get(n)
            .and_then(Option::as_ref)
            .ok_or_else(|| Error::InvalidInput(format!("no working covariance block for {n} occasions")))
    }

    /// Σ⁻¹ v for a subject with `v.len()` occasions.
    pub fn solve(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        Ok(self.block(v.len())?.factor.solve(v))
    }

    /// Σ⁻¹ M for a subject with `m.nrows()` occasions.
    pub fn solve_matrix(&self, m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        Ok(self.block(m.nrows())?.factor.solve(m))
    }

    pub fn lag_correlations(&self) -> &LagCorrelations {
        &self.rho
    }

    pub fn variances(&self) -> &ScoreVariances {
        &self.variances
    }
}

/// Assembles Σ_i[j][k] = √σ_j · C[j][k] · √σ_k for every occasion count in
/// `sizes`, using the leading n×n block of `correlation`.
pub fn assemble_working_covariance(
    variances: &ScoreVariances,
    correlation: &RegularizedCorrelation,
    rho: &LagCorrelations,
    sizes: impl IntoIterator<Item = usize>,
) -> Result<WorkingCovariance> {
    let c = &correlation.matrix;
    let mut blocks: Vec<Option<CovarianceBlock>> = Vec::new();
    for n in sizes {
        if n == 0 {
            return Err(Error::InvalidInput("subject with zero occasions".into()));
        }
        if n > c.nrows() || n > variances.len() {
            return Err(Error::InvalidInput(format!(
                "subject with {n} occasions exceeds working covariance size {}",
                c.nrows().min(variances.len())
            )));
        }
        if blocks.len() <= n {
            blocks.resize(n + 1, None);
        }
        if blocks[n].is_some() {
            continue;
        }
        let sd: Vec<f64> = (0..n).map(|j| variances.get(j).sqrt()).collect();
        let sigma = DMatrix::from_fn(n, n, |j, k| sd[j] * c[(j, k)] * sd[k]);
        let factor = Cholesky::new(sigma.clone())
            .ok_or_else(|| Error::Singular("working covariance is not positive definite".into()))?;
        blocks[n] = Some(CovarianceBlock { sigma, factor });
    }
    Ok(WorkingCovariance {
        blocks,
        rho: rho.clone(),
        variances: variances.clone(),
    })
}

/// Working covariance σ·I for every subject of `dataset`.
pub fn independence_covariance(dataset: &LongitudinalDataset, sigma: f64) -> Result<WorkingCovariance> {
    let n = dataset.max_occasions();
    let variances = ScoreVariances::constant(sigma, n)?;
    let correlation = RegularizedCorrelation {
        matrix: DMatrix::identity(n, n),
        shrinkage: 0.0,
    };
    assemble_working_covariance(
        &variances,
        &correlation,
        &LagCorrelations::zeros(n.saturating_sub(1)),
        dataset.subjects().iter().map(|s| s.len()),
    )
}

/// Estimates ρ̂ from the scores at `beta` and assembles the stationary working covariance.
pub fn estimated_covariance(
    dataset: &LongitudinalDataset,
    beta: &DVector<f64>,
    tau: QuantileLevel,
    variances: &ScoreVariances,
) -> Result<WorkingCovariance> {
    let scores = standardized_scores(dataset, beta, tau, variances)?;
    let rho = estimate_lag_correlations(&scores)?;
    stationary_covariance(dataset, &rho, variances)
}

/// Stationary working covariance for given lag correlations.
pub fn stationary_covariance(
    dataset: &LongitudinalDataset,
    rho: &LagCorrelations,
    variances: &ScoreVariances,
) -> Result<WorkingCovariance> {
    let c = build_stationary_correlation(rho, dataset.max_occasions())?;
    let reg = regularize_correlation(&c);
    assemble_working_covariance(variances, &reg, rho, dataset.subjects().iter().map(|s| s.len()))
}
