//! Plain CSV artifacts shared by the oracles, harness and CLI.

use std::path::Path;

use serde::{Deserialize, Serialize};

/// One checked quantity: what was measured against what was predicted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleRow {
    pub quantity: String,
    pub empirical: f64,
    pub predicted: f64,
    pub std_error: f64,
    pub n: u64,
}

impl OracleRow {
    pub fn new(quantity: impl Into<String>, empirical: f64, predicted: f64, std_error: f64, n: u64) -> Self {
        Self { quantity: quantity.into(), empirical, predicted, std_error, n }
    }
}

/// Serializes rows with a header derived from the row type.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.flush()
}

/// Serializes rows under an explicit header; an empty table still gets the header.
pub fn write_csv_with_header<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> std::io::Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r).map_err(std::io::Error::other)?;
    }
    w.flush()
}

pub fn write_oracle_csv(path: &Path, rows: &[OracleRow]) -> std::io::Result<()> {
    write_csv_with_header(path, &["quantity", "empirical", "predicted", "std_error", "n"], rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_csv_has_fixed_columns() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.csv");
        write_oracle_csv(&p, &[OracleRow::new("x", 1.0, 2.0, 0.5, 10)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "quantity,empirical,predicted,std_error,n");
        write_oracle_csv(&p, &[]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap().trim(), "quantity,empirical,predicted,std_error,n");
    }
}
