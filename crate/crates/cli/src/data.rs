//! Numeric CSV input.

use std::path::Path;

use convmmd::Dataset;

use crate::error::{CliError, Result};

/// A header row and numeric columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl Table {
    pub fn rows(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        self.header
            .iter()
            .position(|h| h == name)
            .map(|i| self.columns[i].as_slice())
    }

    /// The named columns as a row-major dataset.
    pub fn select(&self, names: &[String], path: &Path) -> Result<Dataset> {
        let cols = names
            .iter()
            .map(|n| {
                self.column(n).ok_or_else(|| {
                    CliError::usage(format!(
                        "{}: missing column `{n}`; found {}",
                        path.display(),
                        self.header.join(", ")
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset::from_columns(&cols)?)
    }
}

pub fn read_csv(path: &Path) -> Result<Table> {
    let csv_err = |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    let mut columns = vec![Vec::new(); header.len()];
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        for (j, field) in rec.iter().enumerate() {
            let v: f64 = field.parse().map_err(|_| {
                CliError::usage(format!(
                    "{}: row {}, column `{}`: `{field}` is not a number",
                    path.display(),
                    i + 2,
                    header[j]
                ))
            })?;
            columns[j].push(v);
        }
    }
    if header.is_empty() || columns[0].is_empty() {
        return Err(convmmd::Error::EmptyDataset.into());
    }
    Ok(Table { header, columns })
}
