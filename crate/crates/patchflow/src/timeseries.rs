//! Named scalar channels sampled in time; the substrate for decay-rate fits.

use std::io::{self, BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TimeSeriesError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("unknown channel '{0}'")]
    UnknownChannel(String),
    #[error("malformed CSV at line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Column-oriented time series. The first channel is always `t`.
#[derive(Debug, Clone, Default)]
pub struct TimeSeries {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

impl TimeSeries {
    pub fn new(names: &[&str]) -> Self {
        assert!(!names.is_empty() && names[0] == "t", "first channel must be t");
        Self {
            names: names.iter().map(|s| s.to_string()).collect(),
            columns: vec![Vec::new(); names.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, |c| c.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn push_row(&mut self, row: &[f64]) {
        assert_eq!(row.len(), self.names.len());
        for (col, v) in self.columns.iter_mut().zip(row) {
            col.push(*v);
        }
    }

    pub fn channel(&self, name: &str) -> Result<&[f64], TimeSeriesError> {
        let k = self
            .names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| TimeSeriesError::UnknownChannel(name.to_string()))?;
        Ok(&self.columns[k])
    }

    pub fn time(&self) -> &[f64] {
        &self.columns[0]
    }

    /// Full-precision CSV: header row, then one row per sample.
    pub fn write_csv(&self, mut w: impl Write) -> Result<(), TimeSeriesError> {
        writeln!(w, "{}", self.names.join(","))?;
        for r in 0..self.len() {
            let row: Vec<String> = self.columns.iter().map(|c| format!("{:.16e}", c[r])).collect();
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }

    pub fn write_csv_file(&self, path: &Path) -> Result<(), TimeSeriesError> {
        let f = std::fs::File::create(path)?;
        self.write_csv(io::BufWriter::new(f))
    }

    pub fn read_csv(r: impl io::Read) -> Result<Self, TimeSeriesError> {
        let reader = io::BufReader::new(r);
        let mut lines = reader.lines();
        let header = lines
            .next()
            .ok_or(TimeSeriesError::Malformed { line: 0, reason: "empty file".into() })??;
        let names: Vec<String> = header.split(',').map(|s| s.trim().to_string()).collect();
        let mut ts = TimeSeries { columns: vec![Vec::new(); names.len()], names };
        for (k, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<&str> = line.split(',').collect();
            if vals.len() != ts.names.len() {
                return Err(TimeSeriesError::Malformed {
                    line: k + 2,
                    reason: format!("expected {} fields, found {}", ts.names.len(), vals.len()),
                });
            }
            for (col, v) in ts.columns.iter_mut().zip(&vals) {
                let x: f64 = v.trim().parse().map_err(|e| TimeSeriesError::Malformed {
                    line: k + 2,
                    reason: format!("bad float '{v}': {e}"),
                })?;
                col.push(x);
            }
        }
        Ok(ts)
    }

    pub fn read_csv_file(path: &Path) -> Result<Self, TimeSeriesError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}
