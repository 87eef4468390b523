//! CSV datasets: one header row, numeric cells, one named label column.

use std::path::Path;

use gep_core::linalg::DenseMatrix;
use gep_core::models::Dataset;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalize {
    #[default]
    None,
    /// Per-feature standardization with statistics of the training file.
    Standardize,
}

/// Reads `path` in file order. Rows are 1-based and count the header.
pub fn ingest_csv(path: &Path, label_column: &str) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    if headers.is_empty() {
        return Err(parse(path, 1, "-", "empty file"));
    }
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| parse(path, 1, label_column, format!("label column `{label_column}` not found")))?;
    let d = headers.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2;
        let record = record.map_err(|e| csv_error(path, e))?;
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse(path, row, &headers[j], format!("`{cell}` is not a number")))?;
            if !value.is_finite() {
                return Err(parse(path, row, &headers[j], format!("`{cell}` is not finite")));
            }
            if j == label_idx {
                labels.push(value);
            } else {
                features.push(value);
            }
        }
    }
    if labels.is_empty() {
        return Err(parse(path, 2, "-", "no data rows"));
    }
    let x = DenseMatrix::new(labels.len(), d, features)?;
    let name = path.file_stem().map_or_else(|| "csv".into(), |s| s.to_string_lossy().into_owned());
    Ok(Dataset::new(x, labels, name)?)
}

fn parse(path: &Path, row: usize, column: &str, message: impl Into<String>) -> CliError {
    CliError::Parse {
        path: path.to_path_buf(),
        row,
        column: column.to_string(),
        message: message.into(),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let row = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        csv::ErrorKind::UnequalLengths { expected_len, len, .. } => {
            parse(path, row, "-", format!("expected {expected_len} fields, found {len}"))
        }
        other => parse(path, row, "-", format!("{other:?}")),
    }
}

/// Per-feature mean and standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: &Dataset) -> Self {
        let x = &data.features;
        let n = x.rows() as f64;
        let mean: Vec<f64> = x.row_mean();
        let mut var = vec![0.0; x.cols()];
        for row in x.row_iter() {
            for ((v, a), m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (a - m) * (a - m) / n;
            }
        }
        Self {
            mean,
            std: var.into_iter().map(f64::sqrt).collect(),
        }
    }

    /// `(x − mean)/std`; a constant feature maps to zero.
    pub fn apply(&self, data: &Dataset) -> Result<Dataset> {
        let mut x = data.features.clone();
        for i in 0..x.rows() {
            for ((v, m), s) in x.row_mut(i).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = if *s > 0.0 { (*v - m) / s } else { 0.0 };
            }
        }
        Ok(Dataset::new(x, data.labels.clone(), data.name.clone())?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(text.as_bytes()).unwrap();
        f
    }

    #[test]
    fn toy_file() {
        let f = write("x1,x2,label\n1,2,0\n3,4,1\n5,6,1\n");
        let d = ingest_csv(f.path(), "label").unwrap();
        assert_eq!((d.len(), d.dim()), (3, 2));
        assert_eq!(d.features.row(1), &[3.0, 4.0]);
        assert_eq!(d.labels, vec![0.0, 1.0, 1.0]);
    }

    #[test]
    fn label_column_may_sit_anywhere() {
        let f = write("y,a,b\n1,0.5,-1\n");
        let d = ingest_csv(f.path(), "y").unwrap();
        assert_eq!(d.features.row(0), &[0.5, -1.0]);
        assert_eq!(d.labels, vec![1.0]);
    }

    #[test]
    fn errors_carry_location() {
        let f = write("x1,x2,label\n1,2,0\n");
        let err = ingest_csv(f.path(), "target").unwrap_err().to_string();
        assert!(err.contains("target"), "{err}");

        let f = write("x1,x2,label\n1,2,0\n3,oops,1\n");
        match ingest_csv(f.path(), "label").unwrap_err() {
            CliError::Parse { row, column, .. } => assert_eq!((row, column.as_str()), (3, "x2")),
            other => panic!("{other}"),
        }

        let f = write("x1,x2,label\n1,2,0\n3,4\n");
        assert!(matches!(ingest_csv(f.path(), "label"), Err(CliError::Parse { row: 3, .. })));

        let f = write("");
        assert!(ingest_csv(f.path(), "label").is_err());
        let f = write("x1,label\n");
        assert!(ingest_csv(f.path(), "label").is_err());
    }

    #[test]
    fn standardization_uses_training_statistics() {
        let train = ingest_csv(write("a,c,label\n1,7,0\n3,7,1\n").path(), "label").unwrap();
        let test = ingest_csv(write("a,c,label\n5,9,0\n").path(), "label").unwrap();
        let s = Standardizer::fit(&train);
        let t = s.apply(&train).unwrap();
        assert_eq!(t.features.row(0), &[-1.0, 0.0]);
        assert_eq!(t.features.row(1), &[1.0, 0.0]);
        // Constant training column maps to zero even where the test file varies.
        assert_eq!(s.apply(&test).unwrap().features.row(0), &[3.0, 0.0]);
    }
}
