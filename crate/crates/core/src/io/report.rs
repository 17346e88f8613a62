//! CSV reports: a header row, LF line endings, floats at 9 significant digits.

use std::path::Path;

use crate::error::{Error, Result};

/// Formats like C's `%.9g`: nine significant digits, trailing zeros dropped,
/// scientific notation outside `1e-5 <= |x| < 1e9`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci
        .split_once('e')
        .expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("exponent is an integer");
    if !(-5..9).contains(&exp) {
        return format!("{}e{exp}", trim_zeros(mantissa));
    }
    let decimals = (8 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Int(v) => v.to_string(),
            Cell::Float(v) => format_sig9(*v),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

/// A homogeneous table: every row has one cell per column.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReportTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl ReportTable {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Self {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) -> Result<()> {
        if row.len() != self.columns.len() {
            return Err(Error::shape(
                "ReportTable::push",
                self.columns.len(),
                row.len(),
            ));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(csv_err)?;
        w.write_record(&self.columns).map_err(csv_err)?;
        for row in &self.rows {
            if row.len() != self.columns.len() {
                return Err(Error::shape(
                    "ReportTable::write",
                    self.columns.len(),
                    row.len(),
                ));
            }
            w.write_record(row.iter().map(Cell::render))
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a table back; cells come back as text and can be parsed with
    /// [`ReadTable::f64`].
    pub fn read(path: &Path) -> Result<ReadTable> {
        let csv_err = |source| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut r = csv::ReaderBuilder::new().from_path(path).map_err(csv_err)?;
        let columns = r
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()
            .map_err(csv_err)?;
        Ok(ReadTable { columns, rows })
    }
}

#[derive(Debug, Clone)]
pub struct ReadTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl ReadTable {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn f64(&self, row: usize, column: &str) -> Option<f64> {
        let c = self.column_index(column)?;
        self.rows.get(row)?.get(c)?.parse().ok()
    }

    pub fn text(&self, row: usize, column: &str) -> Option<&str> {
        let c = self.column_index(column)?;
        self.rows.get(row)?.get(c).map(String::as_str)
    }
}

/// Writes a table; thin wrapper kept for symmetry with the other writers.
pub fn write_report(table: &ReportTable, path: &Path) -> Result<()> {
    table.write(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_formatting() {
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(0.5), "0.5");
        assert_eq!(format_sig9(-2.0), "-2");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1234567890.0), "1.23456789e9");
        assert_eq!(format_sig9(1e-7), "1e-7");
        assert_eq!(format_sig9(0.000123456789123), "0.000123456789");
        assert_eq!(format_sig9(9.9999999999), "10");
        assert_eq!(format_sig9(0.0), "0");
    }

    #[test]
    fn empty_table_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        ReportTable::new(["a", "b"]).write(&p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n");
    }

    #[test]
    fn round_trip_and_line_endings() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        let mut t = ReportTable::new(["name", "n", "value"]);
        t.push(vec!["x".into(), 3usize.into(), (1.0 / 3.0).into()])
            .unwrap();
        t.push(vec!["y".into(), 4usize.into(), 0.25.into()])
            .unwrap();
        assert!(t.push(vec!["short".into()]).is_err());
        t.write(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(!text.contains('\r'));
        let back = ReportTable::read(&p).unwrap();
        assert_eq!(back.columns, vec!["name", "n", "value"]);
        assert_eq!(back.f64(0, "value"), Some(0.333333333));
        assert_eq!(back.f64(1, "value"), Some(0.25));
        assert_eq!(back.text(1, "name"), Some("y"));
        assert!(ReportTable::new(["a"])
            .write(Path::new("/nonexistent/dir/r.csv"))
            .is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn sig9_round_trips_to_nine_digits(x in prop::num::f64::NORMAL) {
                let s = format_sig9(x);
                let back: f64 = s.parse().unwrap();
                prop_assert!((back - x).abs() <= 5.1e-9 * x.abs());
                // formatting is a fixed point after one rounding
                prop_assert_eq!(format_sig9(back), s);
            }
        }
    }
}
