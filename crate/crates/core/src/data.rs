//! Dataset container and CSV I/O.
//!
//! The on-disk format is one row per datapoint with D real columns and no
//! header. An optional trailing integer column carries 1-based component
//! labels.

use std::path::Path;

use nalgebra::DVector;

use crate::error::{Error, Result};

/// N datapoints of dimension D.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    rows: Vec<DVector<f64>>,
    dim: usize,
}

impl Dataset {
    pub fn new(rows: Vec<DVector<f64>>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::validation("dataset must contain at least one row"));
        }
        let dim = rows[0].len();
        if dim == 0 {
            return Err(Error::validation("dataset rows must have at least one column"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(Error::validation(format!(
                    "row {} has {} columns, expected {dim}",
                    i + 1,
                    r.len()
                )));
            }
            if r.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!("row {} contains a non-finite value", i + 1)));
            }
        }
        Ok(Self { rows, dim })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &DVector<f64> {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[DVector<f64>] {
        &self.rows
    }

    /// Reads a headerless CSV. With `with_labels`, the last column is parsed
    /// as a 1-based component label and returned separately.
    pub fn read_csv(path: impl AsRef<Path>, with_labels: bool) -> Result<(Self, Option<Vec<usize>>)> {
        let path = path.as_ref();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record.map_err(|e| Error::csv(path, e))?;
            let mut vals: Vec<f64> = Vec::with_capacity(record.len());
            for field in record.iter() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    Error::validation(format!(
                        "{}: line {}: cannot parse '{field}' as a number",
                        path.display(),
                        line + 1
                    ))
                })?;
                vals.push(v);
            }
            if with_labels {
                let lab = vals.pop().ok_or_else(|| {
                    Error::validation(format!("{}: line {}: empty row", path.display(), line + 1))
                })?;
                if lab < 1.0 || lab.fract() != 0.0 {
                    return Err(Error::validation(format!(
                        "{}: line {}: label column must be a positive integer",
                        path.display(),
                        line + 1
                    )));
                }
                labels.push(lab as usize);
            }
            rows.push(DVector::from_vec(vals));
        }
        let data = Dataset::new(rows)?;
        Ok((data, if with_labels { Some(labels) } else { None }))
    }

    /// Writes a headerless CSV, optionally appending a 1-based label column.
    pub fn write_csv(&self, path: impl AsRef<Path>, labels: Option<&[usize]>) -> Result<()> {
        let path = path.as_ref();
        if let Some(labels) = labels {
            if labels.len() != self.len() {
                return Err(Error::validation("label count does not match dataset length"));
            }
        }
        let mut writer = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)
            .map_err(|e| Error::csv(path, e))?;
        for (i, row) in self.rows.iter().enumerate() {
            let mut record: Vec<String> = row.iter().map(|v| format_f64(*v)).collect();
            if let Some(labels) = labels {
                record.push(labels[i].to_string());
            }
            writer.write_record(&record).map_err(|e| Error::csv(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

/// Shortest decimal representation that round-trips through `parse::<f64>()`.
pub fn format_f64(v: f64) -> String {
    format!("{v}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let rows = vec![
            DVector::from_vec(vec![0.1, -2.5e-17]),
            DVector::from_vec(vec![1.0 / 3.0, 7.0]),
        ];
        let data = Dataset::new(rows).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        data.write_csv(&p, Some(&[1, 2])).unwrap();
        let (back, labels) = Dataset::read_csv(&p, true).unwrap();
        assert_eq!(back, data);
        assert_eq!(labels.unwrap(), vec![1, 2]);

        let p2 = dir.path().join("d2.csv");
        back.write_csv(&p2, Some(&[1, 2])).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn rejects_ragged_and_non_finite_rows() {
        assert!(Dataset::new(vec![
            DVector::from_vec(vec![1.0, 2.0]),
            DVector::from_vec(vec![1.0]),
        ])
        .is_err());
        assert!(Dataset::new(vec![DVector::from_vec(vec![f64::NAN])]).is_err());
        assert!(Dataset::new(vec![]).is_err());
    }
}
