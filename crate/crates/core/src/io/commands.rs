use std::path::PathBuf;

use super::input::{load_csv, LoadedData};
use super::report::{format_significant, Cell, ReportDocument, DEFAULT_PRECISION};
use super::{parse_methods, parse_reals, parse_taus};
use crate::error::{Error, Result};
use crate::model::{Method, QuantileLevel};
use crate::simulation::{run_study, ErrorCase, SimConfig};
use crate::solver::{confidence_intervals, fit_methods, SolverConfig};
use crate::sparsity::GammaMode;

const VERSION: &str = env!("CARGO_PKG_VERSION");

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn tau_list(taus: &[QuantileLevel]) -> String {
    join(&taus.iter().map(|t| t.value()).collect::<Vec<_>>())
}

/// Inputs of the `fit` command.
#[derive(Debug, Clone, PartialEq)]
pub struct FitCommandSpec {
    pub input: PathBuf,
    pub response: String,
    pub id: String,
    /// Covariate columns in design order.
    pub covariates: Vec<String>,
    /// Product columns appended after the covariates.
    pub interactions: Vec<(String, String)>,
    pub intercept: bool,
    pub taus: Vec<QuantileLevel>,
    pub methods: Vec<Method>,
    pub gamma_mode: GammaMode,
    pub output: Option<PathBuf>,
}

impl FitCommandSpec {
    pub fn new(input: PathBuf, response: impl Into<String>, id: impl Into<String>) -> Self {
        Self {
            input,
            response: response.into(),
            id: id.into(),
            covariates: Vec::new(),
            interactions: Vec::new(),
            intercept: true,
            taus: vec![QuantileLevel::new(0.5).expect("valid level")],
            methods: vec![Method::Pqr],
            gamma_mode: GammaMode::Hk,
            output: None,
        }
    }

    pub(crate) fn validate_columns(&self) -> Result<()> {
        if !self.intercept && self.covariates.is_empty() && self.interactions.is_empty() {
            return Err(Error::Usage("model has no terms: give covariates or keep the intercept".into()));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_columns()?;
        if self.taus.is_empty() {
            return Err(Error::Usage("at least one quantile level is required".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Usage("at least one method is required".into()));
        }
        Ok(())
    }

    pub fn design_columns(&self) -> Vec<String> {
        let mut names = Vec::new();
        if self.intercept {
            names.push("(Intercept)".to_string());
        }
        names.extend(self.covariates.iter().cloned());
        names.extend(self.interactions.iter().map(|(a, b)| format!("{a}:{b}")));
        names
    }
}

/// Loads the data named by `spec` and fits every requested (τ, method).
pub fn run_fit_command(spec: &FitCommandSpec) -> Result<ReportDocument> {
    spec.validate()?;
    let loaded = load_csv(&spec.input, spec)?;
    fit_report(&loaded, spec)
}

/// Fits every (τ, method) of `spec` on already loaded data.
pub fn fit_report(loaded: &LoadedData, spec: &FitCommandSpec) -> Result<ReportDocument> {
    spec.validate()?;
    let data = &loaded.dataset;
    let config = SolverConfig {
        gamma_mode: spec.gamma_mode,
        ..SolverConfig::default()
    };
    let mut doc = ReportDocument::new(&[
        "tau",
        "method",
        "coefficient",
        "estimate",
        "se",
        "ci_lower",
        "ci_upper",
        "iterations",
        "converged",
    ]);
    doc.push_meta("version", VERSION);
    doc.push_meta("input", spec.input.display());
    doc.push_meta("response", &spec.response);
    doc.push_meta("subjects", data.m());
    doc.push_meta("observations", data.n_obs());
    doc.push_meta("dropped_rows", loaded.dropped_rows);
    doc.push_meta("gamma", spec.gamma_mode);
    doc.push_meta("taus", tau_list(&spec.taus));
    doc.push_meta("methods", join(&spec.methods));

    let mut non_converged = 0;
    let mut lags = Vec::new();
    for &tau in &spec.taus {
        let fits = fit_methods(data, tau, &spec.methods, &config)
            .map_err(|e| e.with_context(format!("tau = {}", tau.value())))?;
        for (method, fit) in fits {
            let fit = fit.map_err(|e| e.with_context(format!("tau = {}, method {method}", tau.value())))?;
            non_converged += usize::from(!fit.converged);
            let ci = confidence_intervals(&fit, 0.95)?;
            for (k, name) in loaded.columns.iter().enumerate() {
                doc.push_row(vec![
                    Cell::Number(tau.value()),
                    Cell::text(method.as_str()),
                    Cell::text(name),
                    Cell::Number(fit.beta[k]),
                    Cell::Number(fit.std_errors[k]),
                    Cell::Number(ci[k].0),
                    Cell::Number(ci[k].1),
                    Cell::Count(fit.iterations as u64),
                    Cell::text(fit.converged.to_string()),
                ]);
            }
            if !fit.rho_hat.is_empty() {
                lags.push((format!("rho_hat tau={} {method}", tau.value()), fit.rho_hat.iter().map(|r| format_significant(*r, DEFAULT_PRECISION)).collect::<Vec<_>>().join(",")));
            }
        }
    }
    for (k, v) in lags {
        doc.push_meta(k, v);
    }
    doc.push_meta("non_converged", non_converged);
    Ok(doc)
}

/// Partially specified simulation settings, from flags or a `key = value` file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimulateOptions {
    pub case: Option<ErrorCase>,
    pub rhos: Option<Vec<f64>>,
    pub m: Option<usize>,
    pub n: Option<usize>,
    pub replications: Option<usize>,
    pub taus: Option<Vec<QuantileLevel>>,
    pub methods: Option<Vec<Method>>,
    pub seed: Option<u64>,
    pub gamma: Option<GammaMode>,
    pub beta: Option<Vec<f64>>,
}

fn parse_count<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Usage(format!("`{key}` expects a non-negative integer, got `{value}`")))
}

impl SimulateOptions {
    /// Parses `key = value` lines; blank lines and lines starting with `#` are ignored.
    pub fn from_config_str(text: &str) -> Result<Self> {
        let mut opts = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("config line {}: expected key = value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "case" => opts.case = Some(value.parse()?),
                "rho" => opts.rhos = Some(parse_reals(value, "rho")?),
                "m" => opts.m = Some(parse_count(key, value)?),
                "n" => opts.n = Some(parse_count(key, value)?),
                "reps" | "replications" => opts.replications = Some(parse_count(key, value)?),
                "taus" | "tau" => opts.taus = Some(parse_taus(value)?),
                "methods" | "method" => opts.methods = Some(parse_methods(value)?),
                "seed" => opts.seed = Some(parse_count(key, value)?),
                "gamma" => opts.gamma = Some(value.parse()?),
                "beta" => opts.beta = Some(parse_reals(value, "beta")?),
                other => return Err(Error::Usage(format!("config line {}: unknown key `{other}`", lineno + 1))),
            }
        }
        Ok(opts)
    }

    /// Fields set in `higher` take precedence.
    pub fn overlay(self, higher: SimulateOptions) -> SimulateOptions {
        SimulateOptions {
            case: higher.case.or(self.case),
            rhos: higher.rhos.or(self.rhos),
            m: higher.m.or(self.m),
            n: higher.n.or(self.n),
            replications: higher.replications.or(self.replications),
            taus: higher.taus.or(self.taus),
            methods: higher.methods.or(self.methods),
            seed: higher.seed.or(self.seed),
            gamma: higher.gamma.or(self.gamma),
            beta: higher.beta.or(self.beta),
        }
    }

    /// Fills unset fields with the defaults: the full published design
    /// (m = 500, n = 4, ρ ∈ {0.1, 0.5, 0.9}, 1000 replications).
    pub fn resolve(self) -> Result<SimulateSettings> {
        let defaults = SimConfig::default();
        let base = SimConfig {
            m: self.m.unwrap_or(defaults.m),
            n: self.n.unwrap_or(defaults.n),
            beta_true: self.beta.unwrap_or(defaults.beta_true),
            rho: defaults.rho,
            error_case: self.case.unwrap_or(defaults.error_case),
            taus: self.taus.unwrap_or(defaults.taus),
            methods: self.methods.unwrap_or(defaults.methods),
            replications: self.replications.unwrap_or(defaults.replications),
            master_seed: self.seed.unwrap_or(defaults.master_seed),
            solver: SolverConfig {
                gamma_mode: self.gamma.unwrap_or(GammaMode::Hk),
                ..defaults.solver
            },
        };
        let settings = SimulateSettings {
            base,
            rhos: self.rhos.unwrap_or_else(|| vec![0.1, 0.5, 0.9]),
        };
        for c in settings.configs() {
            c.validate().map_err(|e| Error::Usage(e.to_string()))?;
        }
        Ok(settings)
    }
}

/// A resolved simulation: one study per AR(1) parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSettings {
    pub base: SimConfig,
    pub rhos: Vec<f64>,
}

impl SimulateSettings {
    pub fn configs(&self) -> impl Iterator<Item = SimConfig> + '_ {
        self.rhos.iter().map(|&rho| SimConfig { rho, ..self.base.clone() })
    }
}

/// Runs every study and tabulates one row per (ρ, τ, method, coefficient).
pub fn run_simulate_command(settings: &SimulateSettings) -> Result<ReportDocument> {
    if settings.rhos.is_empty() {
        return Err(Error::Usage("at least one rho is required".into()));
    }
    let base = &settings.base;
    let mut doc = ReportDocument::new(&[
        "case",
        "rho",
        "tau",
        "method",
        "coefficient",
        "bias",
        "sd",
        "mean_se",
        "eff",
        "coverage",
        "n_ok",
        "n_fail",
    ]);
    doc.push_meta("version", VERSION);
    doc.push_meta("seed", base.master_seed);
    doc.push_meta("case", base.error_case);
    doc.push_meta("m", base.m);
    doc.push_meta("n", base.n);
    doc.push_meta("beta_true", join(&base.beta_true));
    doc.push_meta("rho", join(&settings.rhos));
    doc.push_meta("taus", tau_list(&base.taus));
    doc.push_meta("methods", join(&base.methods));
    doc.push_meta("replications", base.replications);
    doc.push_meta("gamma", base.solver.gamma_mode);

    let mut non_converged = 0;
    for config in settings.configs() {
        let report = run_study(&config).map_err(|e| e.with_context(format!("rho = {}", config.rho)))?;
        non_converged += report.failures();
        for cell in &report.cells {
            doc.push_row(vec![
                Cell::text(config.error_case.as_str()),
                Cell::Number(config.rho),
                Cell::Number(cell.tau.value()),
                Cell::text(cell.method.as_str()),
                Cell::text(format!("beta{}", cell.coefficient)),
                Cell::maybe(cell.bias),
                Cell::maybe(cell.sd),
                Cell::maybe(cell.mean_se),
                Cell::maybe(cell.eff),
                Cell::maybe(cell.coverage),
                Cell::Count(cell.n_ok as u64),
                Cell::Count(cell.n_fail as u64),
            ]);
        }
    }
    doc.push_meta("non_converged", non_converged);
    Ok(doc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LongitudinalDataset, Subject};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn q(t: f64) -> QuantileLevel {
        QuantileLevel::new(t).unwrap()
    }

    fn synthetic(noise: f64, rho_zero: bool, seed: u64) -> LoadedData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let subjects = (0..150)
            .map(|i| {
                let rows: Vec<Vec<f64>> = (0..4).map(|_| vec![rng.sample(StandardNormal)]).collect();
                let shared: f64 = if rho_zero { 0.0 } else { rng.sample(StandardNormal) };
                let y: Vec<f64> = rows
                    .iter()
                    .map(|r| {
                        let e: f64 = rng.sample(StandardNormal);
                        1.0 + 2.0 * r[0] + noise * (e + shared)
                    })
                    .collect();
                Subject::from_rows(format!("s{i}"), &rows, &y, true).unwrap()
            })
            .collect();
        LoadedData {
            dataset: LongitudinalDataset::new(subjects).unwrap(),
            columns: vec!["(Intercept)".into(), "x".into()],
            dropped_rows: 0,
        }
    }

    fn spec(methods: Vec<Method>) -> FitCommandSpec {
        FitCommandSpec {
            covariates: vec!["x".into()],
            methods,
            ..FitCommandSpec::new(PathBuf::from("synthetic.csv"), "y", "id")
        }
    }

    fn estimates(doc: &ReportDocument, method: &str) -> Vec<f64> {
        let m = doc.column("method").unwrap();
        let e = doc.column("estimate").unwrap();
        doc.rows
            .iter()
            .filter(|r| r[m].as_text() == Some(method))
            .map(|r| r[e].as_number().unwrap())
            .collect()
    }

    #[test]
    fn near_noiseless_recovery() {
        let doc = fit_report(&synthetic(1e-3, false, 1), &spec(vec![Method::Pqr])).unwrap();
        let est = estimates(&doc, "PQR");
        assert!((est[0] - 1.0).abs() < 0.01 && (est[1] - 2.0).abs() < 0.01, "{est:?}");
        assert_eq!(doc.rows.len(), 2);
        assert!(doc.meta("rho_hat tau=0.5 PQR").is_some());
        assert_eq!(doc.meta("non_converged"), Some("0"));
    }

    #[test]
    fn wi_and_pqr_agree_without_correlation() {
        let doc = fit_report(&synthetic(1.0, true, 2), &spec(vec![Method::Wi, Method::Pqr])).unwrap();
        let wi = estimates(&doc, "WI");
        let pqr = estimates(&doc, "PQR");
        let gap = wi.iter().zip(&pqr).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(gap <= 0.02, "{wi:?} vs {pqr:?}");
    }

    #[test]
    fn empty_tau_list_is_usage_error() {
        let s = FitCommandSpec {
            taus: vec![],
            ..spec(vec![Method::Wi])
        };
        let err = run_fit_command(&s).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn missing_file_is_data_error() {
        let s = FitCommandSpec {
            input: PathBuf::from("/nonexistent/data.csv"),
            ..spec(vec![Method::Wi])
        };
        assert_eq!(run_fit_command(&s).unwrap_err().exit_code(), 3);
    }

    #[test]
    fn solver_errors_carry_context() {
        let mut loaded = synthetic(1.0, true, 3);
        let rows: Vec<Vec<f64>> = vec![vec![1.0]; 3];
        loaded.dataset = LongitudinalDataset::new(
            (0..4)
                .map(|i| Subject::from_rows(i.to_string(), &rows, &[1.0, 2.0, 3.0], true).unwrap())
                .collect(),
        )
        .unwrap();
        let err = fit_report(&loaded, &spec(vec![Method::Wi])).unwrap_err();
        assert!(err.to_string().starts_with("tau = 0.5"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn config_file_and_precedence() {
        let file = SimulateOptions::from_config_str("# study\nm = 40\nreps=5\nrho = 0.3, 0.6\ncase = t\n\nseed = 9\n").unwrap();
        let flags = SimulateOptions {
            m: Some(25),
            ..SimulateOptions::default()
        };
        let settings = file.overlay(flags).resolve().unwrap();
        assert_eq!(settings.base.m, 25);
        assert_eq!(settings.base.replications, 5);
        assert_eq!(settings.base.error_case, ErrorCase::T3);
        assert_eq!(settings.base.master_seed, 9);
        assert_eq!(settings.rhos, vec![0.3, 0.6]);
        assert_eq!(settings.base.n, 4);

        assert!(SimulateOptions::from_config_str("speed = 3").is_err());
        assert!(SimulateOptions::from_config_str("m").is_err());
        assert!(SimulateOptions::from_config_str("m = -1").is_err());
        let bad = SimulateOptions {
            rhos: Some(vec![1.5]),
            ..SimulateOptions::default()
        };
        assert_eq!(bad.resolve().unwrap_err().exit_code(), 2);
    }

    #[test]
    fn defaults_echo_published_design() {
        let s = SimulateOptions::default().resolve().unwrap();
        assert_eq!((s.base.m, s.base.n, s.base.replications), (500, 4, 1000));
        assert_eq!(s.base.beta_true, vec![-0.5, 0.5, 1.0]);
        assert_eq!(s.rhos, vec![0.1, 0.5, 0.9]);
        assert_eq!(tau_list(&s.base.taus), "0.25,0.5,0.95");
    }

    fn small_settings() -> SimulateSettings {
        SimulateOptions {
            m: Some(30),
            n: Some(3),
            replications: Some(3),
            rhos: Some(vec![0.5]),
            taus: Some(vec![q(0.5)]),
            methods: Some(vec![Method::Wi, Method::Pqr]),
            seed: Some(11),
            ..SimulateOptions::default()
        }
        .resolve()
        .unwrap()
    }

    #[test]
    fn simulate_report_is_reproducible_with_unit_wi_efficiency() {
        let a = run_simulate_command(&small_settings()).unwrap().to_csv(6).unwrap();
        let b = run_simulate_command(&small_settings()).unwrap().to_csv(6).unwrap();
        assert_eq!(a, b);
        let doc = ReportDocument::from_csv(&a).unwrap();
        assert_eq!(doc.rows.len(), 6);
        let method = doc.column("method").unwrap();
        let eff = doc.column("eff").unwrap();
        for row in doc.rows.iter().filter(|r| r[method].as_text() == Some("WI")) {
            assert_eq!(row[eff], Cell::Number(1.0));
        }
        assert!(a.lines().filter(|l| !l.starts_with('#')).skip(1).all(|l| l.contains(",1.00000,") || !l.contains(",WI,")));
    }
}
