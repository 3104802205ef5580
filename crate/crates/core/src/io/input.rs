use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use super::commands::FitCommandSpec;
use crate::error::{Error, Result};
use crate::model::{LongitudinalDataset, Subject};

/// A dataset read from long-format CSV.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub dataset: LongitudinalDataset,
    /// Design column names in order, including `(Intercept)` when present.
    pub columns: Vec<String>,
    /// Rows skipped because a required field was empty or not numeric.
    pub dropped_rows: usize,
}

pub fn load_csv(path: &Path, spec: &FitCommandSpec) -> Result<LoadedData> {
    let file = File::open(path).map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?;
    read_dataset(file, spec).map_err(|e| match e {
        Error::Csv(inner) => Error::Data(format!("{}: {inner}", path.display())),
        other => other,
    })
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn(name.to_string()))
}

fn numeric(field: Option<&str>) -> Option<f64> {
    field
        .filter(|f| !f.is_empty())
        .and_then(|f| f.parse::<f64>().ok())
        .filter(|v| v.is_finite())
}

/// Reads observations in file order and groups them by subject in order of first appearance.
pub fn read_dataset<R: Read>(reader: R, spec: &FitCommandSpec) -> Result<LoadedData> {
    spec.validate_columns()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(true)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let id_col = column_index(&headers, &spec.id)?;
    let y_col = column_index(&headers, &spec.response)?;
    let x_cols = spec
        .covariates
        .iter()
        .map(|c| column_index(&headers, c))
        .collect::<Result<Vec<_>>>()?;
    let products = spec
        .interactions
        .iter()
        .map(|(a, b)| Ok((column_index(&headers, a)?, column_index(&headers, b)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, (Vec<Vec<f64>>, Vec<f64>)> = HashMap::new();
    let mut dropped = 0;
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Data(format!("malformed CSV: {e}")))?;
        let id = record.get(id_col).unwrap_or("");
        let y = numeric(record.get(y_col));
        let mut row: Vec<f64> = Vec::with_capacity(x_cols.len() + products.len());
        let mut complete = !id.is_empty() && y.is_some();
        for &c in &x_cols {
            match numeric(record.get(c)) {
                Some(v) => row.push(v),
                None => complete = false,
            }
        }
        for &(a, b) in &products {
            match (numeric(record.get(a)), numeric(record.get(b))) {
                (Some(u), Some(v)) => row.push(u * v),
                _ => complete = false,
            }
        }
        if !complete {
            dropped += 1;
            continue;
        }
        let entry = groups.entry(id.to_string()).or_insert_with(|| {
            order.push(id.to_string());
            (Vec::new(), Vec::new())
        });
        entry.0.push(row);
        entry.1.push(y.expect("checked complete"));
    }
    if order.is_empty() {
        return Err(Error::Data(format!("no usable rows ({dropped} dropped)")));
    }

    let subjects = order
        .into_iter()
        .map(|id| {
            let (rows, y) = groups.remove(&id).expect("grouped id");
            Subject::from_rows(id, &rows, &y, spec.intercept)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedData {
        dataset: LongitudinalDataset::new(subjects)?,
        columns: spec.design_columns(),
        dropped_rows: dropped,
    })
}
