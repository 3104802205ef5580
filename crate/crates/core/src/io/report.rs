use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Significant digits used for numeric output unless overridden.
pub const DEFAULT_PRECISION: usize = 6;

const MISSING: &str = "NA";

/// Formats `x` with `digits` significant digits in the style of C's `%#.*g`:
/// fixed notation for exponents in [−4, digits), scientific otherwise, with
/// trailing zeros kept.
pub fn format_significant(x: f64, digits: usize) -> String {
    let digits = digits.clamp(1, 17);
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return format!("{:.*}", digits - 1, 0.0);
    }
    let sci = format!("{:.*e}", digits - 1, x);
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= digits as i32 {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    } else {
        format!("{:.*}", (digits as i32 - 1 - exp) as usize, x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Text(String),
    Number(f64),
    Count(u64),
    /// An undefined statistic, written as `NA`.
    Missing,
}

impl Cell {
    pub fn text(s: impl Into<String>) -> Self {
        Cell::Text(s.into())
    }

    pub fn maybe(x: Option<f64>) -> Self {
        x.map_or(Cell::Missing, Cell::Number)
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            Cell::Number(x) => Some(*x),
            Cell::Count(n) => Some(*n as f64),
            _ => None,
        }
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Cell::Text(s) => Some(s),
            _ => None,
        }
    }

    fn render(&self, precision: usize) -> String {
        match self {
            Cell::Text(s) => s.clone(),
            Cell::Number(x) => format_significant(*x, precision),
            Cell::Count(n) => n.to_string(),
            Cell::Missing => MISSING.into(),
        }
    }

    fn parse(field: &str) -> Self {
        if field == MISSING {
            Cell::Missing
        } else if let Ok(n) = field.parse::<u64>() {
            Cell::Count(n)
        } else if let Ok(x) = field.parse::<f64>() {
            Cell::Number(x)
        } else {
            Cell::Text(field.to_string())
        }
    }
}

/// A metadata block followed by one table.
///
/// The CSV form writes each metadata entry as a `# key: value` line before
/// the header row.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportDocument {
    pub metadata: Vec<(String, String)>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl ReportDocument {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            metadata: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        self.metadata.push((key.into(), value.to_string().replace(['\n', '\r'], " ")));
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn push_row(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cells of column `name`, top to bottom.
    pub fn values(&self, name: &str) -> Option<Vec<&Cell>> {
        let k = self.column(name)?;
        Some(self.rows.iter().map(|r| &r[k]).collect())
    }

    pub fn to_csv(&self, precision: usize) -> Result<String> {
        let mut out = String::new();
        for (k, v) in &self.metadata {
            writeln!(out, "# {k}: {v}").expect("write to string");
        }
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|c| c.render(precision)))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        out.push_str(std::str::from_utf8(&bytes).expect("csv output is UTF-8"));
        Ok(out)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut metadata = Vec::new();
        let mut body = String::new();
        for line in text.lines() {
            if let Some(entry) = line.strip_prefix('#') {
                let (k, v) = entry
                    .trim_start()
                    .split_once(": ")
                    .ok_or_else(|| Error::Data(format!("malformed metadata line `{line}`")))?;
                metadata.push((k.to_string(), v.to_string()));
            } else {
                body.push_str(line);
                body.push('\n');
            }
        }
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(body.as_bytes());
        let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
        let mut rows = Vec::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() != columns.len() {
                return Err(Error::Data("report row width differs from header".into()));
            }
            rows.push(record.iter().map(Cell::parse).collect());
        }
        Ok(Self {
            metadata,
            columns,
            rows,
        })
    }

    /// Equality with numbers compared after rounding to `precision` significant digits.
    pub fn matches_at(&self, other: &Self, precision: usize) -> bool {
        self.metadata == other.metadata
            && self.columns == other.columns
            && self.rows.len() == other.rows.len()
            && self.rows.iter().zip(&other.rows).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.render(precision) == y.render(precision))
            })
    }

    /// Metadata lines followed by the table with aligned columns; numbers are right-aligned.
    pub fn summary_text(&self, precision: usize) -> String {
        let rendered: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| r.iter().map(|c| c.render(precision)).collect())
            .collect();
        let widths: Vec<usize> = (0..self.columns.len())
            .map(|k| {
                rendered
                    .iter()
                    .map(|r| r[k].chars().count())
                    .chain(std::iter::once(self.columns[k].chars().count()))
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let mut out = String::new();
        for (k, v) in &self.metadata {
            writeln!(out, "{k}: {v}").expect("write to string");
        }
        if !self.metadata.is_empty() {
            out.push('\n');
        }
        let header: Vec<String> = self
            .columns
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c:>w$}"))
            .collect();
        writeln!(out, "{}", header.join("  ").trim_end()).expect("write to string");
        for (row, cells) in rendered.iter().zip(&self.rows) {
            let line: Vec<String> = row
                .iter()
                .zip(cells)
                .zip(&widths)
                .map(|((s, c), &w)| match c {
                    Cell::Text(_) => format!("{s:<w$}"),
                    _ => format!("{s:>w$}"),
                })
                .collect();
            writeln!(out, "{}", line.join("  ").trim_end()).expect("write to string");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn significant_digit_examples() {
        assert_eq!(format_significant(1.0, 6), "1.00000");
        assert_eq!(format_significant(0.0, 6), "0.00000");
        assert_eq!(format_significant(-0.5, 6), "-0.500000");
        assert_eq!(format_significant(123456.7, 6), "123457");
        assert_eq!(format_significant(1234567.0, 6), "1.23457e+06");
        assert_eq!(format_significant(0.000123456789, 6), "0.000123457");
        assert_eq!(format_significant(0.0000123456789, 6), "1.23457e-05");
        assert_eq!(format_significant(0.7128674, 6), "0.712867");
        assert_eq!(format_significant(9.9999996, 6), "10.0000");
        assert_eq!(format_significant(2.0f64.sqrt(), 17), "1.4142135623730951");
        assert_eq!(format_significant(f64::NAN, 6), "NaN");
    }

    fn sample() -> ReportDocument {
        let mut doc = ReportDocument::new(&["tau", "method", "estimate", "sd", "n"]);
        doc.push_meta("seed", 42);
        doc.push_meta("design", "m=500, n=4");
        doc.push_row(vec![Cell::Number(0.5), Cell::text("pqr"), Cell::Number(-0.49871234), Cell::Missing, Cell::Count(200)]);
        doc.push_row(vec![Cell::Number(0.25), Cell::text("wi"), Cell::Number(1.0e-7 / 3.0), Cell::Number(2.5), Cell::Count(0)]);
        doc
    }

    #[test]
    fn csv_layout() {
        let text = sample().to_csv(6).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# seed: 42");
        assert_eq!(lines[1], "# design: m=500, n=4");
        assert_eq!(lines[2], "tau,method,estimate,sd,n");
        assert_eq!(lines[3], "0.500000,pqr,-0.498712,NA,200");
        assert_eq!(lines[4], "0.250000,wi,3.33333e-08,2.50000,0");
    }

    #[test]
    fn summary_is_aligned() {
        let text = sample().summary_text(6);
        let table: Vec<&str> = text.lines().skip(3).collect();
        assert_eq!(table.len(), 3);
        assert!(table[0].ends_with("n"));
        assert!(table[1].ends_with("NA  200"));
        assert_eq!(table[1].find("pqr"), table[2].find("wi"));
    }

    #[test]
    fn round_trip_example() {
        let doc = sample();
        let parsed = ReportDocument::from_csv(&doc.to_csv(6).unwrap()).unwrap();
        assert!(parsed.matches_at(&doc, 6));
        assert_eq!(parsed.meta("seed"), Some("42"));
        assert_eq!(parsed.rows[0][3], Cell::Missing);
        assert_eq!(parsed.rows[0][4], Cell::Count(200));
    }

    proptest! {
        #[test]
        fn numeric_cells_round_trip(values in prop::collection::vec(prop::num::f64::NORMAL, 1..20), digits in 1usize..=17) {
            let mut doc = ReportDocument::new(&["x"]);
            for v in &values {
                doc.push_row(vec![Cell::Number(*v)]);
            }
            let parsed = ReportDocument::from_csv(&doc.to_csv(digits).unwrap()).unwrap();
            prop_assert!(parsed.matches_at(&doc, digits));
        }

        #[test]
        fn rounding_is_idempotent(x in prop::num::f64::NORMAL) {
            let once = format_significant(x, 6);
            let twice = format_significant(once.parse().unwrap(), 6);
            prop_assert_eq!(once, twice);
        }
    }
}
