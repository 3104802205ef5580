//! Sparsity weights f_ij(0), the diagonal of Γ_i.

use crate::error::{Error, Result};
use crate::model::{normal_pdf, normal_quantile, FitResult, LongitudinalDataset, QuantileLevel};

pub const D_MIN: f64 = 1e-6;
pub const F_MIN: f64 = 1e-3;
pub const F_MAX: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GammaMode {
    /// Hendricks–Koenker difference quotient.
    Hk,
    Identity,
}

impl std::str::FromStr for GammaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hk" => Ok(GammaMode::Hk),
            "identity" | "id" => Ok(GammaMode::Identity),
            other => Err(Error::Usage(format!("unknown gamma mode `{other}` (expected hk or identity)"))),
        }
    }
}

impl std::fmt::Display for GammaMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GammaMode::Hk => "hk",
            GammaMode::Identity => "identity",
        })
    }
}

/// Per-observation density-at-zero weights, grouped by subject.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityWeights {
    values: Vec<Vec<f64>>,
    mode: GammaMode,
}

impl SparsityWeights {
    pub fn mode(&self) -> GammaMode {
        self.mode
    }

    /// Weights of subject `i`.
    pub fn subject(&self, i: usize) -> &[f64] {
        &self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.values.iter().flatten().copied()
    }

    pub fn len(&self) -> usize {
        self.values.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Uniform weights `c` for every observation; used to check that Γ = c·I leaves the root unchanged.
    pub fn uniform(dataset: &LongitudinalDataset, c: f64) -> Self {
        Self {
            values: dataset.subjects().iter().map(|s| vec![c; s.len()]).collect(),
            mode: GammaMode::Identity,
        }
    }
}

/// Hall–Sheather bandwidth for sparsity estimation at level τ with `n_obs` observations,
/// clamped so that τ ± h stays inside (0.01, 0.99).
pub fn hall_sheather_bandwidth(tau: QuantileLevel, n_obs: usize) -> Result<f64> {
    if n_obs < 10 {
        return Err(Error::InsufficientData(format!(
            "bandwidth needs at least 10 observations, got {n_obs}"
        )));
    }
    let t = tau.value();
    let limit = (t - 0.01).min(0.99 - t);
    if limit <= 0.0 {
        return Err(Error::InvalidInput(format!("quantile level {t} too extreme for sparsity estimation")));
    }
    let z = normal_quantile(0.975);
    let x0 = normal_quantile(t);
    let f0 = normal_pdf(x0);
    let bracket = 1.5 * f0 * f0 / (2.0 * x0 * x0 + 1.0);
    let h = (n_obs as f64).powf(-1.0 / 3.0) * z.powf(2.0 / 3.0) * bracket.cbrt();
    // strict inequalities at the clamp
    Ok(h.min(limit * (1.0 - 1e-9)))
}

/// f̂_ij = 2h / x_ij'(β̂_{τ+h} − β̂_{τ−h}), guarded against crossing and clamped to [F_MIN, F_MAX].
pub fn estimate_sparsity_hk(
    dataset: &LongitudinalDataset,
    _tau: QuantileLevel,
    h: f64,
    lower: &FitResult,
    upper: &FitResult,
) -> Result<SparsityWeights> {
    if !lower.converged || !upper.converged {
        return Err(Error::Precondition("sparsity estimation needs converged fits at τ ± h".into()));
    }
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!("bandwidth must be positive, got {h}")));
    }
    let delta = &upper.beta - &lower.beta;
    if delta.len() != dataset.p() {
        return Err(Error::InvalidInput("auxiliary fit dimension mismatch".into()));
    }

    let raw: Vec<Vec<Option<f64>>> = dataset
        .subjects()
        .iter()
        .map(|s| {
            let d = s.covariates() * &delta;
            d.iter().map(|&d| (d >= D_MIN).then(|| 2.0 * h / d)).collect()
        })
        .collect();

    let mut valid: Vec<f64> = raw.iter().flatten().filter_map(|v| *v).collect();
    let fallback = if valid.is_empty() {
        1.0
    } else {
        valid.sort_by(f64::total_cmp);
        let k = valid.len();
        if k % 2 == 1 {
            valid[k / 2]
        } else {
            0.5 * (valid[k / 2 - 1] + valid[k / 2])
        }
    };

    Ok(SparsityWeights {
        values: raw
            .into_iter()
            .map(|row| row.into_iter().map(|v| v.unwrap_or(fallback).clamp(F_MIN, F_MAX)).collect())
            .collect(),
        mode: GammaMode::Hk,
    })
}

pub fn identity_sparsity(dataset: &LongitudinalDataset) -> SparsityWeights {
    SparsityWeights::uniform(dataset, 1.0)
}
