//! Command drivers, CSV ingestion and report serialization.

mod commands;
mod input;
mod report;

pub use commands::{fit_report, run_fit_command, run_simulate_command, FitCommandSpec, SimulateOptions, SimulateSettings};
pub use input::{load_csv, read_dataset, LoadedData};
pub use report::{format_significant, Cell, ReportDocument, DEFAULT_PRECISION};

use crate::error::{Error, Result};
use crate::model::{Method, QuantileLevel};

/// Splits a comma-separated list, ignoring surrounding whitespace and empty items.
pub(crate) fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty())
}

pub fn parse_taus(s: &str) -> Result<Vec<QuantileLevel>> {
    let taus = split_list(s)
        .map(|t| {
            let v: f64 = t
                .parse()
                .map_err(|_| Error::Usage(format!("quantile level `{t}` is not a number")))?;
            QuantileLevel::new(v).map_err(|e| Error::Usage(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if taus.is_empty() {
        return Err(Error::Usage("at least one quantile level is required".into()));
    }
    Ok(taus)
}

pub fn parse_methods(s: &str) -> Result<Vec<Method>> {
    let mut methods = Vec::new();
    for m in split_list(s) {
        let m: Method = m.parse()?;
        if !methods.contains(&m) {
            methods.push(m);
        }
    }
    if methods.is_empty() {
        return Err(Error::Usage("at least one method is required".into()));
    }
    Ok(methods)
}

pub fn parse_reals(s: &str, what: &str) -> Result<Vec<f64>> {
    let values = split_list(s)
        .map(|t| t.parse::<f64>().map_err(|_| Error::Usage(format!("{what} `{t}` is not a number"))))
        .collect::<Result<Vec<_>>>()?;
    if values.is_empty() {
        return Err(Error::Usage(format!("{what} list is empty")));
    }
    Ok(values)
}
